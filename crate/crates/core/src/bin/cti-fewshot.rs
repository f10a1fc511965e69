fn main() {
    std::process::exit(cti_fewshot::cli::dispatch(std::env::args_os()));
}
