fn main() {
    std::process::exit(fedgame::cli::main_with(std::env::args_os()));
}
