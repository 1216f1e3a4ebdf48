use clap::Parser;

fn main() {
    std::process::exit(curvkit::cli::run(curvkit::cli::Cli::parse()));
}
