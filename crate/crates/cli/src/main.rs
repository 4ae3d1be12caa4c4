fn main() {
    std::process::exit(knn_tts_cli::main_with_args(std::env::args_os()));
}
