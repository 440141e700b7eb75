fn main() {
    std::process::exit(wings_lab::cli::run(std::env::args_os()));
}
