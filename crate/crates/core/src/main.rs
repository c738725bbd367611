fn main() {
    std::process::exit(iyolo::cli::run(std::env::args_os()));
}
