fn main() {
    if let Err(e) = afrl::cli::run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
