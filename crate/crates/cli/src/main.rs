fn main() {
    std::process::exit(bias_lens_cli::cli::run(std::env::args_os()));
}
