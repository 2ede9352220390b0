use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.is_empty() || args.iter().any(|a| a == "--help" || a == "-h") {
        print!("{}", quasihom::usage());
        return if args.is_empty() { ExitCode::from(2) } else { ExitCode::SUCCESS };
    }
    match quasihom::run(args) {
        Ok(outcome) => {
            print!("{}", outcome.summary.to_csv());
            for f in &outcome.files {
                eprintln!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("quasihom: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
