fn main() {
    std::process::exit(gradcal_cli::app::run_from(std::env::args_os()));
}
