fn main() {
    std::process::exit(tvseg::cli::run(std::env::args_os()));
}
