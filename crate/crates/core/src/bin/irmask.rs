use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use tracing_subscriber::EnvFilter;

use irmask::attack::{run_attack, run_dodge, AttackConfig, AttackError, FdScheme, GradMode};
use irmask::calibration::{calibrate_once, CalibrationSettings};
use irmask::dodging::{
    check_dodge_embedding, check_dodge_landmark, flood_illuminate, ExternalLandmarks, LandmarkOracle,
    LuminanceLandmarkStub,
};
use irmask::image::{load_image, save_image, Image, ImageError};
use irmask::oracle::wire;
use irmask::oracle::{EmbeddingOracle, OracleConfig, OracleError, ReferenceEmbedding, DEFAULT_THRESHOLD, DEFAULT_TIMEOUT_SECS};
use irmask::radiometry::{radiated_power, RadiometryInput};
use irmask::service::{serve, AppState, OraclePool, ServiceSettings};
use irmask::spot::{synthesize, PerturbationConfig, DEFAULT_COLOR_RATIO};
use irmask::study::{run_study, StudyConfig, StudyError, DEFAULT_BINS};

#[derive(Parser)]
#[command(name = "irmask", version, about = "Infrared light-spot perturbations against face-embedding oracles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search a spot layout that makes the attacker match the victim.
    Attack(AttackCmd),
    /// Search a layout (or flood) that stops the attacker matching themself.
    Dodge(DodgeCmd),
    /// Compare LEDs-on/off photos against the target layout.
    Calibrate(CalibrateCmd),
    /// Success rates over a victim directory, binned by distance.
    Study(StudyCmd),
    /// Irradiance of an LED spot, W/m².
    Radiometry(RadiometryCmd),
    /// HTTP session service for interactive tuning.
    Serve(ServeCmd),
    /// Serve the built-in reference embedding and landmark stub over the
    /// oracle line protocol.
    #[command(hide = true)]
    Oracle(OracleCmd),
}

#[derive(Args, Clone)]
struct OracleArgs {
    /// `reference`, an http(s) URL, or a command speaking the line protocol
    #[arg(long, default_value = "reference")]
    oracle: String,
    /// Seconds to wait for each oracle reply
    #[arg(long, default_value_t = DEFAULT_TIMEOUT_SECS)]
    oracle_timeout: f64,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

impl OracleArgs {
    fn config(&self) -> OracleConfig {
        OracleConfig {
            threshold: self.threshold,
            timeout_secs: self.oracle_timeout,
            ..OracleConfig::from_selector(&self.oracle)
        }
    }
}

#[derive(Args, Clone)]
struct SearchArgs {
    #[arg(long, default_value_t = 5)]
    spots: usize,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    /// Extra iterations after a successful main phase
    #[arg(long, default_value_t = 200)]
    refine: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Estimate gradients from oracle queries instead of the oracle's pullback
    #[arg(long)]
    blackbox: bool,
    /// Central instead of forward differences in black-box mode
    #[arg(long)]
    central: bool,
}

impl SearchArgs {
    fn config(&self, threshold: f64, oracle: &dyn EmbeddingOracle) -> AttackConfig {
        AttackConfig {
            n_spots: self.spots,
            max_iters: self.iters,
            refine_iters: self.refine,
            seed: self.seed,
            threshold,
            grad_mode: if self.blackbox || !oracle.supports_gradient() {
                GradMode::Blackbox
            } else {
                GradMode::Whitebox
            },
            fd_scheme: if self.central { FdScheme::Central } else { FdScheme::Forward },
            ..AttackConfig::default()
        }
    }
}

#[derive(Args)]
struct AttackCmd {
    #[arg(long)]
    attacker: PathBuf,
    #[arg(long)]
    victim: PathBuf,
    #[command(flatten)]
    oracle: OracleArgs,
    #[command(flatten)]
    search: SearchArgs,
    /// Write the result JSON here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the best layout in the spot-model JSON format
    #[arg(long)]
    config_out: Option<PathBuf>,
    /// Write the synthesized adversarial image
    #[arg(long)]
    image_out: Option<PathBuf>,
}

#[derive(Args)]
struct DodgeCmd {
    #[arg(long)]
    attacker: PathBuf,
    #[command(flatten)]
    oracle: OracleArgs,
    #[command(flatten)]
    search: SearchArgs,
    /// Flood the whole face at this strength instead of searching spots
    #[arg(long)]
    flood: Option<f64>,
    /// Landmark oracle: `reference` or an endpoint speaking the line protocol
    #[arg(long)]
    landmarks: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    image_out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateCmd {
    /// Photo with the LEDs on
    #[arg(long)]
    on: PathBuf,
    /// Photo with the LEDs off
    #[arg(long)]
    off: PathBuf,
    /// Target layout (spot-model JSON)
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    victim: PathBuf,
    #[command(flatten)]
    oracle: OracleArgs,
    #[arg(long, default_value_t = CalibrationSettings::default().search_radius)]
    search_radius: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StudyCmd {
    /// Attacker image; repeat for several attackers
    #[arg(long, required = true)]
    attacker: Vec<PathBuf>,
    /// Directory of aligned victim images
    #[arg(long)]
    victims: PathBuf,
    #[command(flatten)]
    oracle: OracleArgs,
    #[command(flatten)]
    search: SearchArgs,
    /// Parallel attacks, each with its own oracle connection
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Distance bins as `lo:hi,lo:hi,...` (each is `(lo, hi]`)
    #[arg(long)]
    bins: Option<String>,
    /// JSON-lines checkpoint; an existing one is resumed
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Report JSON (stdout if omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-bin CSV summary
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct RadiometryCmd {
    /// LED power, W
    #[arg(long)]
    pled: f64,
    /// Infrared efficiency in (0, 1]
    #[arg(long)]
    eta: f64,
    /// Spot radius, m
    #[arg(long)]
    r: f64,
}

#[derive(Args)]
struct ServeCmd {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[command(flatten)]
    oracle: OracleArgs,
    /// Oracle connections shared by all sessions
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Persist sessions here and reload them on start
    #[arg(long)]
    state_dir: Option<PathBuf>,
    /// Seconds of inactivity before a session is dropped
    #[arg(long, default_value_t = 3600)]
    idle_ttl: u64,
    /// Allowed browser origin; any if omitted
    #[arg(long)]
    cors_origin: Option<String>,
    #[arg(long, default_value_t = 5)]
    spots: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct OracleCmd {
    /// Serve HTTP on this address instead of stdio
    #[arg(long)]
    http: Option<SocketAddr>,
    /// Mean luma above which the landmark stub reports no face
    #[arg(long, default_value_t = 0.85)]
    landmark_threshold: f64,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Oracle(String),
    NoExample,
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Oracle(_) => 2,
            Failure::NoExample => 3,
        }
    }
}

impl From<OracleError> for Failure {
    fn from(e: OracleError) -> Self {
        Failure::Oracle(e.to_string())
    }
}

impl From<ImageError> for Failure {
    fn from(e: ImageError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<AttackError> for Failure {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Oracle(e) => e.into(),
            e @ AttackError::NonFinite { .. } => Failure::Oracle(e.to_string()),
            e => Failure::Usage(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(path) => std::fs::write(path, format!("{text}\n"))
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn connect(args: &OracleArgs) -> Result<Box<dyn EmbeddingOracle>, Failure> {
    if !(args.threshold > 0.0) {
        return Err(Failure::Usage(format!("--threshold must be > 0, got {}", args.threshold)));
    }
    Ok(args.config().connect()?)
}

fn attack(cmd: AttackCmd) -> Outcome {
    let attacker = load_image(&cmd.attacker)?;
    let victim = load_image(&cmd.victim)?;
    let oracle = connect(&cmd.oracle)?;
    let cfg = cmd.search.config(cmd.oracle.threshold, oracle.as_ref());
    let result = run_attack(&attacker, &victim, &cfg, oracle.as_ref())?;
    tracing::info!(best = result.best_distance, success = result.success, calls = result.oracle_calls, "attack done");
    if let Some(p) = &cmd.config_out {
        write_file(p, &result.best_config.to_json())?;
    }
    if let Some(p) = &cmd.image_out {
        save_image(&synthesize(&attacker, &result.best_config).clamped(), p)?;
    }
    emit(cmd.out.as_deref(), &result.to_json())?;
    if result.success {
        Ok(())
    } else {
        Err(Failure::NoExample)
    }
}

fn landmark_oracle(selector: &str, timeout: f64) -> Result<Box<dyn LandmarkOracle>, Failure> {
    if selector == "reference" {
        Ok(Box::new(LuminanceLandmarkStub::default()))
    } else {
        let endpoint = selector.strip_prefix("cmd:").unwrap_or(selector);
        Ok(Box::new(ExternalLandmarks::connect(endpoint, timeout)?))
    }
}

fn dodge(cmd: DodgeCmd) -> Outcome {
    let attacker = load_image(&cmd.attacker)?;
    let oracle = connect(&cmd.oracle)?;
    let landmarks = cmd
        .landmarks
        .as_deref()
        .map(|s| landmark_oracle(s, cmd.oracle.oracle_timeout))
        .transpose()?;
    let (perturbed, mut report) = match cmd.flood {
        Some(strength) => {
            if !(strength >= 0.0) {
                return Err(Failure::Usage(format!("--flood must be >= 0, got {strength}")));
            }
            (flood_illuminate(&attacker, strength, DEFAULT_COLOR_RATIO), json!({ "mode": "flood", "strength": strength }))
        }
        None => {
            let cfg = cmd.search.config(cmd.oracle.threshold, oracle.as_ref());
            let result = run_dodge(&attacker, &cfg, oracle.as_ref())?;
            let img = synthesize(&attacker, &result.best_config);
            (img, json!({ "mode": "spots", "search": result }))
        }
    };
    let by_embedding = check_dodge_embedding(&attacker, &perturbed, oracle.as_ref(), cmd.oracle.threshold)?;
    let by_landmarks = landmarks
        .as_ref()
        .map(|l| check_dodge_landmark(&perturbed, l.as_ref()))
        .transpose()?;
    report["dodged_embedding"] = json!(by_embedding);
    report["dodged_landmarks"] = json!(by_landmarks);
    if let Some(p) = &cmd.image_out {
        save_image(&perturbed.clamped(), p)?;
    }
    emit(cmd.out.as_deref(), &serde_json::to_string_pretty(&report).expect("json"))?;
    if by_embedding || by_landmarks == Some(true) {
        Ok(())
    } else {
        Err(Failure::NoExample)
    }
}

fn calibrate(cmd: CalibrateCmd) -> Outcome {
    let on = load_image(&cmd.on)?;
    let off = load_image(&cmd.off)?;
    let victim = load_image(&cmd.victim)?;
    let text = std::fs::read_to_string(&cmd.target)
        .map_err(|e| Failure::Usage(format!("{}: {e}", cmd.target.display())))?;
    let target = PerturbationConfig::from_json(&text).map_err(|e| Failure::Usage(format!("target {e}")))?;
    target
        .validate_for_canvas(on.height(), on.width())
        .map_err(|e| Failure::Usage(format!("target {e}")))?;
    let oracle = connect(&cmd.oracle)?;
    let victim = oracle.embed(&victim.clamped())?;
    let settings = CalibrationSettings { search_radius: cmd.search_radius, ..CalibrationSettings::default() };
    let mut report = calibrate_once(&on, &off, &target, &victim, oracle.as_ref(), &settings)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    report.timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .ok()
        .map(|d| d.as_secs());
    emit(cmd.out.as_deref(), &report.to_json())
}

fn parse_bins(text: &str) -> Result<Vec<(f64, f64)>, Failure> {
    text.split(',')
        .map(|pair| {
            let (lo, hi) = pair
                .split_once(':')
                .ok_or_else(|| Failure::Usage(format!("bin '{pair}' is not lo:hi")))?;
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| Failure::Usage(format!("bin '{pair}': {e}")));
            Ok((num(lo)?, num(hi)?))
        })
        .collect()
}

fn study(cmd: StudyCmd) -> Outcome {
    let oracle_cfg = cmd.oracle.config();
    let probe = connect(&cmd.oracle)?;
    let mut cfg = StudyConfig::new(cmd.attacker.clone(), cmd.victims.clone());
    cfg.attack = cmd.search.config(cmd.oracle.threshold, probe.as_ref());
    drop(probe);
    cfg.bins = match &cmd.bins {
        Some(b) => parse_bins(b)?,
        None => DEFAULT_BINS.to_vec(),
    };
    cfg.checkpoint = cmd.checkpoint.clone();
    cfg.jobs = cmd.jobs;
    let report = run_study(&cfg, &|| oracle_cfg.connect()).map_err(|e| {
        if e.is_oracle() {
            Failure::Oracle(e.to_string())
        } else if let StudyError::Attack { source, .. } = e {
            source.into()
        } else {
            Failure::Usage(e.to_string())
        }
    })?;
    if let Some(p) = &cmd.csv {
        let file = std::fs::File::create(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
        report.write_csv(file).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    emit(cmd.out.as_deref(), &report.to_json())
}

fn radiometry(cmd: RadiometryCmd) -> Outcome {
    let v = radiated_power(&RadiometryInput { p_led: cmd.pled, eta: cmd.eta, r: cmd.r })
        .map_err(|e| Failure::Usage(e.to_string()))?;
    println!("{v:?}");
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Usage(format!("runtime: {e}")))
}

fn serve_cmd(cmd: ServeCmd) -> Outcome {
    if cmd.jobs == 0 {
        return Err(Failure::Usage("--jobs must be >= 1".into()));
    }
    let oracles = (0..cmd.jobs).map(|_| connect(&cmd.oracle)).collect::<Result<Vec<_>, _>>()?;
    let settings = ServiceSettings {
        attack: AttackConfig {
            n_spots: cmd.spots,
            seed: cmd.seed,
            threshold: cmd.oracle.threshold,
            grad_mode: if oracles[0].supports_gradient() { GradMode::Whitebox } else { GradMode::Blackbox },
            ..AttackConfig::default()
        },
        idle_ttl: Duration::from_secs(cmd.idle_ttl),
        state_dir: cmd.state_dir,
        cors_origin: cmd.cors_origin,
        ..ServiceSettings::default()
    };
    settings.attack.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let app = AppState::new(OraclePool::new(oracles), settings).map_err(|e| Failure::Usage(e.to_string()))?;
    runtime()?.block_on(async {
        let listener = tokio::net::TcpListener::bind(cmd.addr)
            .await
            .map_err(|e| Failure::Usage(format!("bind {}: {e}", cmd.addr)))?;
        serve(listener, app).await.map_err(|e| Failure::Usage(e.to_string()))
    })
}

/// Answer one protocol request with the reference oracles.
fn answer(request: &Value, landmarks: &LuminanceLandmarkStub) -> Value {
    let reply = || -> Result<Value, OracleError> {
        let img: Image = wire::request_image(request)?;
        match request.get("op").and_then(Value::as_str) {
            Some("embed") => Ok(json!({ "embedding": ReferenceEmbedding::new().embed(&img)?.values })),
            Some("landmarks") => Ok(serde_json::to_value(landmarks.landmarks(&img)?).expect("json")),
            other => Err(OracleError::Malformed(format!("unknown op {other:?}"))),
        }
    };
    reply().unwrap_or_else(|e| json!({ "error": e.to_string() }))
}

fn oracle_cmd(cmd: OracleCmd) -> Outcome {
    let stub = LuminanceLandmarkStub { threshold: cmd.landmark_threshold };
    match cmd.http {
        None => {
            let stdin = std::io::stdin();
            let mut stdout = std::io::stdout().lock();
            for line in stdin.lock().lines() {
                let line = line.map_err(|e| Failure::Usage(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let reply = match serde_json::from_str::<Value>(&line) {
                    Ok(req) => answer(&req, &stub),
                    Err(e) => json!({ "error": format!("bad request: {e}") }),
                };
                writeln!(stdout, "{reply}").and_then(|_| stdout.flush()).map_err(|e| Failure::Usage(e.to_string()))?;
            }
            Ok(())
        }
        Some(addr) => {
            use axum::extract::Path as UrlPath;
            use axum::routing::post;
            let stub = Arc::new(stub);
            let app = axum::Router::new()
                .route(
                    "/{op}",
                    post(move |UrlPath(op): UrlPath<String>, axum::Json(mut req): axum::Json<Value>| {
                        let stub = stub.clone();
                        async move {
                            req["op"] = json!(op);
                            let reply = tokio::task::spawn_blocking(move || answer(&req, &stub))
                                .await
                                .unwrap_or_else(|e| json!({ "error": e.to_string() }));
                            axum::Json(reply)
                        }
                    }),
                )
                .layer(axum::extract::DefaultBodyLimit::max(64 << 20));
            runtime()?.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr)
                    .await
                    .map_err(|e| Failure::Usage(format!("bind {addr}: {e}")))?;
                eprintln!("oracle listening on http://{}", listener.local_addr().map_err(|e| Failure::Usage(e.to_string()))?);
                axum::serve(listener, app).await.map_err(|e| Failure::Usage(e.to_string()))
            })
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let outcome = match cli.command {
        Command::Attack(c) => attack(c),
        Command::Dodge(c) => dodge(c),
        Command::Calibrate(c) => calibrate(c),
        Command::Study(c) => study(c),
        Command::Radiometry(c) => radiometry(c),
        Command::Serve(c) => serve_cmd(c),
        Command::Oracle(c) => oracle_cmd(c),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Oracle(m) => eprintln!("oracle error: {m}"),
                Failure::NoExample => eprintln!("no adversarial example found"),
            }
            ExitCode::from(f.code())
        }
    }
}
