fn main() {
    std::process::exit(demoe_cli::run(std::env::args_os()));
}
