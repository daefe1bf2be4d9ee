fn main() {
    std::process::exit(orthoconv::cli::run(std::env::args_os()));
}
