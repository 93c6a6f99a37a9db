fn main() {
    std::process::exit(discont::cli::run_command(std::env::args_os()));
}
