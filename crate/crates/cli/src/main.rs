fn main() {
    std::process::exit(ngram_dp_cli::run_from(std::env::args_os()));
}
