use std::path::{Path, PathBuf};

use clap::Args;
use otseg_api::{JobEvent, JobParams, JobState};
use otseg_client::{Client, Labels};
use otseg_core::features::FeatureTransform;
use otseg_core::pipeline::{run_job, JobSpec, DIAGNOSTICS_FILE};
use otseg_core::solver::Backend;

use crate::{Failure, EXIT_CONFIG, EXIT_OTHER, EXIT_SOLVER};

#[derive(Args)]
pub struct RunArgs {
    #[arg(long)]
    image: PathBuf,
    /// Red foreground and green background strokes on a black PNG.
    #[arg(long, required_unless_present_all = ["fg", "bg"], conflicts_with_all = ["fg", "bg"])]
    scribbles: Option<PathBuf>,
    /// Foreground mask, used together with `--bg`.
    #[arg(long, requires = "bg")]
    fg: Option<PathBuf>,
    #[arg(long, requires = "fg")]
    bg: Option<PathBuf>,
    #[arg(long, default_value = "sinkhorn-prox")]
    backend: Backend,
    #[arg(long)]
    rho: Option<f64>,
    /// Entropic weight; defaults to 1000/max(C).
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    cost: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    features: Option<FeatureTransform>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    t: Option<f64>,
    /// Pick the threshold with the lowest binary energy.
    #[arg(long)]
    select_t: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Iterations between checkpoints.
    #[arg(long)]
    check_every: Option<usize>,
    /// Dual step size; derived from the operator norm when absent.
    #[arg(long)]
    sigma: Option<f64>,
    /// Weight of ‖K‖ against the gradient Lipschitz constant in the step rule.
    #[arg(long)]
    step_balance: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Submit to a running service instead of solving here.
    #[arg(long, value_name = "URL")]
    server: Option<String>,
}

impl RunArgs {
    fn params(&self) -> JobParams {
        let d = JobParams::default();
        JobParams {
            features: self.features.unwrap_or(d.features),
            bins: self.bins.unwrap_or(d.bins),
            cost: self.cost.clone().unwrap_or(d.cost),
            gamma: self.gamma.unwrap_or(d.gamma),
            backend: self.backend,
            rho: self.rho.unwrap_or(d.rho),
            lambda: self.lambda,
            t: self.t.unwrap_or(d.t),
            select_t: self.select_t,
            iters: self.iters.unwrap_or(d.iters),
            seed: self.seed.unwrap_or(d.seed),
            check_every: self.check_every.unwrap_or(d.check_every),
            sigma: self.sigma,
            step_balance: self.step_balance.unwrap_or(d.step_balance),
        }
    }
}

pub fn run(args: &RunArgs, threads: Option<usize>) -> Result<(), Failure> {
    let params = args.params();
    params.validate()?;
    match &args.server {
        None => local(args, params),
        Some(url) => crate::runtime(threads)?.block_on(remote(url, args, params)),
    }
}

fn local(args: &RunArgs, params: JobParams) -> Result<(), Failure> {
    let spec = JobSpec {
        image: args.image.clone(),
        scribbles: args.scribbles.clone(),
        fg: args.fg.clone(),
        bg: args.bg.clone(),
        params,
        out_dir: args.out.clone(),
    };
    let (seg, outputs) = run_job(&spec)?;
    let s = &seg.summary;
    tracing::info!(
        iterations = s.iterations,
        t = s.t,
        foreground = s.foreground_pixels,
        "wrote {}",
        outputs.summary.display()
    );
    Ok(())
}

fn read_input(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))
}

fn http(e: otseg_client::Error) -> Failure {
    let code = match e.status() {
        Some(s) if s.is_client_error() && s.as_u16() != 404 => EXIT_CONFIG,
        _ => EXIT_OTHER,
    };
    Failure::new(code, e.to_string())
}

async fn remote(url: &str, args: &RunArgs, params: JobParams) -> Result<(), Failure> {
    let client = Client::new(url);
    let image = read_input(&args.image)?;
    let labels = match (&args.scribbles, &args.fg, &args.bg) {
        (Some(s), _, _) => Labels::Scribbles(read_input(s)?),
        (None, Some(fg), Some(bg)) => Labels::Masks { fg: read_input(fg)?, bg: read_input(bg)? },
        _ => return Err(Failure::new(EXIT_CONFIG, "need --scribbles or both --fg and --bg")),
    };
    let max_iter = params.iters;
    let sub = client.submit(image, labels, &params).await.map_err(http)?;
    tracing::info!(job = %sub.id, cached = sub.cached, "submitted");

    let mut diagnostics = Vec::new();
    let mut events = client.events(&sub.id).await.map_err(http)?;
    let terminal = loop {
        use futures::StreamExt as _;
        match events.next().await {
            Some(Ok(JobEvent::Checkpoint(cp))) => {
                tracing::info!(iter = cp.iter, max_iter, residual = cp.residual, "checkpoint");
                diagnostics.extend(serde_json::to_vec(&cp).expect("checkpoint serializes"));
                diagnostics.push(b'\n');
            }
            Some(Ok(JobEvent::Status(t))) => break t,
            Some(Err(e)) => return Err(http(e)),
            None => return Err(Failure::new(EXIT_OTHER, "event stream ended early")),
        }
    };
    if terminal.status == JobState::Failed {
        let status = client.status(&sub.id).await.map_err(http)?;
        let code = if status.solver_abort { EXIT_SOLVER } else { EXIT_OTHER };
        return Err(Failure::new(code, terminal.error.unwrap_or_else(|| "job failed".into())));
    }

    tokio::fs::create_dir_all(&args.out).await?;
    for name in otseg_api::ARTIFACTS {
        let bytes = client.fetch(&sub.id, name).await.map_err(http)?;
        tokio::fs::write(args.out.join(name), bytes).await?;
    }
    tokio::fs::write(args.out.join(DIAGNOSTICS_FILE), diagnostics).await?;
    tracing::info!(job = %sub.id, "wrote {}", args.out.display());
    Ok(())
}
