fn main() {
    std::process::exit(attnalign::cli::run(std::env::args_os()));
}
