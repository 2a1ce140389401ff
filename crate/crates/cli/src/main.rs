fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(equiquant_cli::run(&args));
}
