fn main() {
    std::process::exit(kamdesk_cli::commands::run(std::env::args().collect()));
}
