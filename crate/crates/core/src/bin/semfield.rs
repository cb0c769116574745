fn main() {
    std::process::exit(semfield::cli::run(std::env::args_os()));
}
