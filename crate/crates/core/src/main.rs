fn main() {
    std::process::exit(multiedit::cli::run(std::env::args_os()));
}
