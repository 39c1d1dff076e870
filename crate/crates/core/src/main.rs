fn main() {
    std::process::exit(nlthin::cli::run(std::env::args_os()));
}
