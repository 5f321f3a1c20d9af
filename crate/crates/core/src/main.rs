fn main() {
    std::process::exit(higfa::cli::run(std::env::args_os()));
}
