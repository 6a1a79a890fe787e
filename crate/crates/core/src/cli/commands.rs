use std::io;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::cli::manifest::RunManifest;
use crate::cli::{Cli, Command, EvalMatrixArgs, FederateArgs, FinetuneArgs, GenDataArgs, ReportArgs, TrainLocalArgs};
use crate::client::{client_seed, fine_tune, select_best_model, train_local, CheckpointStore, ClientOutcome};
use crate::config::FederationConfig;
use crate::data::{default_seven_site_profiles, generate_sites, reseed, ProfilesFile, SiteDataset};
use crate::error::{Error, Result};
use crate::eval::{cross_site_matrix, emit_report, matrix_from_csv, matrix_to_csv};
use crate::nn::ParamVector;
use crate::par::Parallelism;
use crate::protocol::{initial_params, join_tcp, serve_tcp, simulate, FederationOutcome};

struct Ctx {
    par: Parallelism,
    out: PathBuf,
    config: FederationConfig,
    explicit_config: bool,
    seed_flag: Option<u64>,
}

pub fn run(cli: &Cli) -> Result<PathBuf> {
    if !cli.out.is_dir() {
        if !cli.create {
            let e = io::Error::new(io::ErrorKind::NotFound, "output directory does not exist (pass --create)");
            return Err(Error::io(&cli.out, e));
        }
        std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    }
    let mut config = match &cli.config {
        Some(p) => FederationConfig::load(p)?,
        None => FederationConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let mut ctx = Ctx {
        par: if cli.sequential { Parallelism::Sequential } else { Parallelism::default() },
        out: cli.out.clone(),
        config,
        explicit_config: cli.config.is_some(),
        seed_flag: cli.seed,
    };
    match &cli.command {
        Command::GenData(a) => gen_data(&ctx, a),
        Command::TrainLocal(a) => cmd_train_local(&mut ctx, a),
        Command::Federate(a) => federate(&mut ctx, a),
        Command::Finetune(a) => finetune(&mut ctx, a),
        Command::EvalMatrix(a) => eval_matrix(&mut ctx, a),
        Command::Report(a) => report(&ctx, a),
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>, manifest: &mut RunManifest) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    manifest.add(path);
    Ok(())
}

/// Files directly inside `dir`, sorted.
fn files_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(path, io::Error::new(io::ErrorKind::NotFound, "required artifact is missing")))
    }
}

/// `site2` sorts before `site10`.
fn natural_key(id: &str) -> (String, u64, String) {
    let digits = id.len() - id.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    let (head, tail) = id.split_at(id.len() - digits);
    (head.to_string(), tail.parse().unwrap_or(0), id.to_string())
}

impl Ctx {
    /// Loads the roster's datasets from `dir`. Without a config file the
    /// roster is every `*.fkds` file found there.
    fn load_sites(&mut self, dir: &Path) -> Result<Vec<SiteDataset>> {
        if !self.explicit_config {
            let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
            let mut ids = Vec::new();
            for entry in entries {
                let path = entry.map_err(|e| Error::io(dir, e))?.path();
                if path.extension().is_some_and(|x| x == "fkds") {
                    if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                        ids.push(stem.to_string());
                    }
                }
            }
            if ids.is_empty() {
                return Err(Error::io(dir, io::Error::new(io::ErrorKind::NotFound, "no .fkds datasets")));
            }
            ids.sort_by_key(|id| natural_key(id));
            self.config.roster = ids;
        }
        let roster = self.config.roster.clone();
        self.par.try_map_range(roster.len(), |i| SiteDataset::load(&dir.join(format!("{}.fkds", roster[i]))))
    }

    fn manifest(&self, sub: &str) -> RunManifest {
        RunManifest::start(sub, self.config.digest(), self.config.seed)
    }

    fn save_config(&self, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
        write(&dir.join("config.toml"), self.config.to_toml()?, manifest)
    }
}

fn gen_data(ctx: &Ctx, a: &GenDataArgs) -> Result<PathBuf> {
    let mut profiles = match &a.profiles {
        Some(p) => ProfilesFile::parse(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => default_seven_site_profiles(a.scale),
    };
    if let Some(seed) = ctx.seed_flag {
        reseed(&mut profiles, seed);
    }
    for p in &profiles {
        p.validate()?;
    }
    let rendered = ProfilesFile::render(&profiles);
    let digest = hex::encode(Sha256::digest(rendered.as_bytes()));
    let mut manifest = RunManifest::start("gen-data", digest, ctx.seed_flag.unwrap_or(0));
    let sites = generate_sites(ctx.par, &profiles)?;
    for site in &sites {
        let path = ctx.out.join(format!("{}.fkds", site.site_id));
        site.save(&path)?;
        manifest.add(path);
        log::info!("{}: {} images", site.site_id, site.len());
    }
    write(&ctx.out.join("profiles.toml"), rendered, &mut manifest)?;
    manifest.finish(&ctx.out)
}

fn cmd_train_local(ctx: &mut Ctx, a: &TrainLocalArgs) -> Result<PathBuf> {
    let sites = ctx.load_sites(&a.data)?;
    if let Some(r) = a.rounds {
        ctx.config.rounds = r;
    }
    ctx.config.validate()?;
    let dir = ctx.out.join("local");
    mkdir(&dir)?;
    let mut manifest = ctx.manifest("train-local");
    ctx.save_config(&dir, &mut manifest)?;
    let (par, config) = (ctx.par, &ctx.config);
    let init = initial_params(config);
    let written = par.try_map_range(sites.len(), |i| -> Result<Vec<PathBuf>> {
        let site = &sites[i];
        let site_dir = dir.join(&site.site_id);
        let mut store = CheckpointStore::on_disk(&site_dir.join("checkpoints"))?;
        let seed = client_seed(config.seed, &site.site_id);
        let history = train_local(par, &config.model, &init, site, &config.train, config.rounds, seed, &mut store)?;
        let (best, round, kappa) = select_best_model(&history, &store, &config.model)?;
        log::info!("{}: best local epoch {round}, val kappa {kappa:?}", site.site_id);
        let h = site_dir.join("history.jsonl");
        history.save(&h)?;
        let b = site_dir.join("best.fkpv");
        best.save(&b)?;
        let mut written = vec![h, b];
        written.extend(files_in(&site_dir.join("checkpoints"))?);
        Ok(written)
    })?;
    written.into_iter().flatten().for_each(|p| manifest.add(p));
    manifest.finish(&ctx.out)
}

fn save_client(dir: &Path, c: &ClientOutcome, manifest: &mut RunManifest) -> Result<()> {
    let h = dir.join("history.jsonl");
    c.history.save(&h)?;
    manifest.add(h);
    let b = dir.join("best.fkpv");
    c.best.save(&b)?;
    manifest.add(b);
    let g = dir.join("final_global.fkpv");
    c.final_global.save(&g)?;
    manifest.add(g);
    for f in files_in(&dir.join("checkpoints"))? {
        manifest.add(f);
    }
    log::info!("{}: selected round {} with val kappa {:?}", c.client_id, c.best_round, c.best_val_kappa);
    Ok(())
}

fn save_server(dir: &Path, f: &FederationOutcome, manifest: &mut RunManifest) -> Result<()> {
    let g = dir.join("global.fkpv");
    f.global.save(&g)?;
    manifest.add(g);
    manifest.add(dir.join("audit.jsonl"));
    for r in &f.rejections {
        log::warn!("round {}: rejected {} from {:?}: {}", r.round, r.message, r.client_id, r.error);
    }
    Ok(())
}

fn federate(ctx: &mut Ctx, a: &FederateArgs) -> Result<PathBuf> {
    if let Some(r) = a.rounds {
        ctx.config.rounds = r;
    }
    let dir = ctx.out.join("federated");
    mkdir(&dir)?;
    let audit = dir.join("audit.jsonl");
    if a.mode.simulate {
        let data = a.data.as_ref().ok_or_else(|| Error::InvalidConfig("--simulate needs --data".into()))?;
        let sites = ctx.load_sites(data)?;
        ctx.config.validate()?;
        let mut manifest = ctx.manifest("federate");
        ctx.save_config(&dir, &mut manifest)?;
        let store_for = |id: &str| CheckpointStore::on_disk(&dir.join(id).join("checkpoints"));
        let sim = simulate(ctx.par, &ctx.config, &sites, Some(&audit), &store_for)?;
        save_server(&dir, &sim.federation, &mut manifest)?;
        for c in &sim.clients {
            save_client(&dir.join(&c.client_id), c, &mut manifest)?;
        }
        manifest.finish(&ctx.out)
    } else if let Some(addr) = &a.mode.serve {
        ctx.config.validate()?;
        let mut manifest = ctx.manifest("federate-serve");
        ctx.save_config(&dir, &mut manifest)?;
        let listener = TcpListener::bind(addr)?;
        log::info!("serving {} clients for {} rounds on {}", ctx.config.roster.len(), ctx.config.rounds, listener.local_addr()?);
        let outcome = serve_tcp(listener, &ctx.config, Some(&audit))?;
        save_server(&dir, &outcome, &mut manifest)?;
        manifest.finish(&ctx.out)
    } else {
        let addr = a.mode.join.as_ref().expect("clap enforces one mode");
        let data = a.data.as_ref().ok_or_else(|| Error::InvalidConfig("--join needs --data".into()))?;
        let (id, path) = if data.is_dir() {
            let id = a.client_id.clone().ok_or_else(|| Error::InvalidConfig("--client-id is required with a data directory".into()))?;
            let path = data.join(format!("{id}.fkds"));
            (id, path)
        } else {
            let stem = data.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            (a.client_id.clone().unwrap_or(stem), data.clone())
        };
        let site = SiteDataset::load(&path)?;
        let client_dir = dir.join(&id);
        let store = CheckpointStore::on_disk(&client_dir.join("checkpoints"))?;
        let mut manifest = RunManifest::start(&format!("federate-join-{id}"), String::new(), ctx.seed_flag.unwrap_or(0));
        let outcome = join_tcp(addr, &id, &site, ctx.seed_flag, ctx.par, store, Duration::from_secs(a.connect_timeout))?;
        save_client(&client_dir, &outcome, &mut manifest)?;
        manifest.finish(&ctx.out)
    }
}

fn load_models(dir: &Path, roster: &[String]) -> Result<Vec<ParamVector>> {
    roster
        .iter()
        .map(|id| {
            let path = dir.join(id).join("best.fkpv");
            require(&path)?;
            ParamVector::load(&path)
        })
        .collect()
}

fn finetune(ctx: &mut Ctx, a: &FinetuneArgs) -> Result<PathBuf> {
    let sites = ctx.load_sites(&a.data)?;
    if let Some(e) = a.epochs {
        ctx.config.train.finetune_epochs = e;
    }
    ctx.config.validate()?;
    let models = load_models(&a.models, &ctx.config.roster)?;
    let dir = ctx.out.join("finetuned");
    mkdir(&dir)?;
    let mut manifest = ctx.manifest("finetune");
    ctx.save_config(&dir, &mut manifest)?;
    let (par, config) = (ctx.par, &ctx.config);
    let written = par.try_map_range(sites.len(), |i| -> Result<Vec<PathBuf>> {
        let site = &sites[i];
        let seed = client_seed(config.seed, &site.site_id);
        let (tuned, history) =
            fine_tune(par, &config.model, &models[i], site, config.train.finetune_epochs, &config.train, seed)?;
        let site_dir = dir.join(&site.site_id);
        mkdir(&site_dir)?;
        let h = site_dir.join("history.jsonl");
        history.save(&h)?;
        let b = site_dir.join("best.fkpv");
        tuned.save(&b)?;
        Ok(vec![h, b])
    })?;
    written.into_iter().flatten().for_each(|p| manifest.add(p));
    manifest.finish(&ctx.out)
}

fn eval_matrix(ctx: &mut Ctx, a: &EvalMatrixArgs) -> Result<PathBuf> {
    let sites = ctx.load_sites(&a.data)?;
    let models = load_models(&a.models, &ctx.config.roster)?;
    let global_path = a.models.join("global.fkpv");
    let global = if global_path.exists() { Some(ParamVector::load(&global_path)?) } else { None };
    let matrix = cross_site_matrix(ctx.par, &ctx.config.model, &models, &sites, global.as_ref())?;
    let name = match &a.name {
        Some(n) => n.clone(),
        None => a.models.file_name().and_then(|s| s.to_str()).unwrap_or("matrix").to_string(),
    };
    let mut manifest = ctx.manifest(&format!("eval-matrix-{name}"));
    write(&ctx.out.join(format!("{name}.csv")), matrix_to_csv(&matrix), &mut manifest)?;
    manifest.finish(&ctx.out)
}

fn read_matrix(path: &Path) -> Result<crate::eval::KappaMatrix> {
    matrix_from_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

fn report(ctx: &Ctx, a: &ReportArgs) -> Result<PathBuf> {
    let local = read_matrix(&a.local.clone().unwrap_or_else(|| ctx.out.join("local.csv")))?;
    let federated = read_matrix(&a.federated.clone().unwrap_or_else(|| ctx.out.join("federated.csv")))?;
    let finetuned = match &a.finetuned {
        Some(p) => Some(read_matrix(p)?),
        None => {
            let p = ctx.out.join("finetuned.csv");
            if p.exists() { Some(read_matrix(&p)?) } else { None }
        }
    };
    let dir = ctx.out.join("report");
    mkdir(&dir)?;
    let mut manifest = RunManifest::start("report", String::new(), ctx.config.seed);
    for p in emit_report(&dir, &local, &federated, finetuned.as_ref())? {
        manifest.add(p);
    }
    print!("{}", std::fs::read_to_string(dir.join("report.txt")).map_err(|e| Error::io(dir.join("report.txt"), e))?);
    manifest.finish(&ctx.out)
}
