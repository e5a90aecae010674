use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcoref::commands::{
    cmd_eval, cmd_gradcheck, cmd_pseudo_dump, cmd_score, cmd_synth, cmd_train, EvalArgs, GradcheckArgs,
    PseudoDumpArgs, ScoreArgs, SynthArgs, TrainArgs,
};
use mcoref::metrics::EvalReport;
use mcoref::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_NUMERIC: u8 = 2;

#[derive(Parser)]
#[command(name = "mcoref", version, about = "Multimodal coreference resolution and grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Run inference on a labeled dataset and score it.
    Eval(EvalArgs),
    /// Score a prediction file against a labeled dataset.
    Score(ScoreArgs),
    /// Compare analytic and finite-difference gradients of every loss.
    Gradcheck(GradcheckArgs),
    /// Write the pseudo-labels a checkpoint assigns to a dataset.
    PseudoDump(PseudoDumpArgs),
}

fn print_report(r: &EvalReport) {
    println!("{:<8} {:>8} {:>8} {:>8}", "metric", "R", "P", "F1");
    for (name, s) in [("MUC", &r.muc), ("B3", &r.b3), ("CEAFe", &r.ceaf)] {
        println!("{:<8} {:>8.4} {:>8.4} {:>8.4}", name, s.recall, s.precision, s.f1);
    }
    println!("CoNLL F1 {:.4}", r.conll_f1);
    println!(
        "grounding NP {:.4}  Pron {:.4}  Overall {:.4}",
        r.grounding.np_acc, r.grounding.pron_acc, r.grounding.overall_acc
    );
}

fn run(cmd: Command) -> Result<u8, Error> {
    match cmd {
        Command::Synth(a) => {
            let m = cmd_synth(&a)?;
            println!("wrote {}", m.outputs[0].path);
        }
        Command::Train(a) => {
            let m = cmd_train(&a)?;
            println!("wrote {} ({:.1}s)", m.outputs[0].path, m.elapsed_secs);
        }
        Command::Eval(a) => print_report(&cmd_eval(&a)?),
        Command::Score(a) => print_report(&cmd_score(&a)?),
        Command::Gradcheck(a) => {
            let r = cmd_gradcheck(&a)?;
            println!("{r}");
            if !r.passed() {
                return Ok(EXIT_NUMERIC);
            }
        }
        Command::PseudoDump(a) => {
            let recs = cmd_pseudo_dump(&a)?;
            println!("wrote pseudo-labels for {} samples to {}", recs.len(), a.out.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_VALIDATION } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { EXIT_NUMERIC } else { EXIT_VALIDATION })
        }
    }
}
