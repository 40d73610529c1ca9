fn main() {
    std::process::exit(d2lora::cli::run(std::env::args_os()));
}
