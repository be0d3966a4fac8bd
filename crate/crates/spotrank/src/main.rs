fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(spotrank::experiments::run_cli(&args));
}
