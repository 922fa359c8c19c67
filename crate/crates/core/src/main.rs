fn main() {
    std::process::exit(unidual::cli::run(std::env::args_os()));
}
