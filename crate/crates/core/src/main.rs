fn main() {
    std::process::exit(spectrum_xai::cli::run(std::env::args_os()));
}
