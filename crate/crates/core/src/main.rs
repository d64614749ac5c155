fn main() {
    std::process::exit(fracture_homog::cli::run(std::env::args_os()));
}
