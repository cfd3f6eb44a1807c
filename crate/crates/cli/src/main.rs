fn main() {
    std::process::exit(clickdrop_cli::run(std::env::args_os()));
}
