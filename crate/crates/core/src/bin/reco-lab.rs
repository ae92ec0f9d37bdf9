fn main() {
    std::process::exit(reco_lab::cli::run(std::env::args_os()));
}
