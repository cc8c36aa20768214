fn main() {
    std::process::exit(phrasebreak::cli::dispatch(std::env::args()));
}
