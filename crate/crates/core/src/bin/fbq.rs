fn main() {
    std::process::exit(feedback_quant::cli::run(std::env::args_os()));
}
