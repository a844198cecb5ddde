fn main() {
    std::process::exit(vastvocab::cli::run(std::env::args_os()));
}
