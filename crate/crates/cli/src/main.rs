fn main() {
    std::process::exit(catintell::cli::run(std::env::args_os()));
}
