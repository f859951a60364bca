fn main() {
    std::process::exit(camml_harness::cli::run(std::env::args_os()));
}
