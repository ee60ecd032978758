use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};

use otf_core::compression::{
    learn_pq_codebook, make_tight_frame, BinaryCodec, BinaryCodes, PqCodebook, PqCodes,
};
use otf_core::eval::{
    run_convergence, run_scenario, split_scenario, ConvergenceConfig, Scenario, ScenarioConfig,
    TrainerSpec,
};
use otf_core::ranker::RankerConfig;
use otf_core::service::{RetrievalService, ServiceConfig};
use otf_core::source::{CorpusSource, StoreFeed};
use otf_core::store::{generate_synthetic, labels_sidecar, SynthConfig};
use otf_core::trainer::{hinge_violations, BatchConfig};
use otf_core::{
    corpus_source, ClockMode, FeatureStore, LabelSet, LinearModel, LoadOptions, Repository,
    PositiveSource, SessionConfig, SessionContext, TrainerConfig,
};

use crate::{
    BatchArgs, BenchRank, Binarize, Convergence, Encode, Evaluate, GenSynth, Ingest, LearnPq,
    RepoArgs, Serve, SessionArgs, TrainBatch,
};

impl Ingest {
    fn options(&self) -> LoadOptions {
        if self.raw {
            LoadOptions::raw()
        } else {
            LoadOptions::default()
        }
    }
}

fn load(path: &Path, ingest: &Ingest) -> Result<FeatureStore> {
    FeatureStore::load(path, &ingest.options()).with_context(|| format!("loading {}", path.display()))
}

fn mib(bytes: u64) -> f64 {
    bytes as f64 / (1u64 << 20) as f64
}

fn write_store(store: &FeatureStore, path: &Path) -> Result<()> {
    store
        .write(path)
        .with_context(|| format!("writing {}", path.display()))
}

pub fn gen_synth(a: GenSynth) -> Result<()> {
    let cfg = SynthConfig {
        dim: a.dim,
        classes: a.classes,
        per_class: a.per_class,
        distractors: a.distractors,
        cluster_spread: a.cluster_spread,
        center_spread: a.center_spread,
        seed: a.seed,
    };
    let (store, labels) = generate_synthetic(&cfg)?;
    let s = split_scenario(&store, &labels, a.train_per_class, a.negatives)?;
    fs::create_dir_all(a.out.join("corpus"))?;

    // Files carry no ids, so the repository is re-indexed by row; names keep
    // the generator's ids.
    let names = s.test.ids().iter().map(|id| format!("synth-{id:07}")).collect();
    let repo = FeatureStore::from_rows(s.test.dim(), s.test.data().to_vec())?.with_names(names)?;
    let mut row_labels = LabelSet::new();
    for (class, ids) in s.test_labels.classes() {
        for &id in ids {
            row_labels.insert(class, s.test.row_of(id).expect("test ids come from the test store") as u64);
        }
    }
    let repo_path = a.out.join("repository.otfr");
    write_store(&repo, &repo_path)?;
    row_labels.write(labels_sidecar(&repo_path))?;
    write_store(&s.negatives, &a.out.join("negatives.otfr"))?;
    for (class, train) in &s.train {
        write_store(train, &a.out.join("corpus").join(format!("{class}.otfr")))?;
    }
    println!(
        "wrote {}: repository {} vectors ({} labeled), negatives {}, corpus {} classes × {} positives, dim {}",
        a.out.display(),
        repo.len(),
        row_labels.classes().map(|(_, ids)| ids.len()).sum::<usize>(),
        s.negatives.len(),
        s.train.len(),
        a.train_per_class,
        a.dim
    );
    Ok(())
}

fn first_rows(store: &FeatureStore, n: usize) -> Result<FeatureStore> {
    if n == 0 || n >= store.len() {
        return Ok(store.clone());
    }
    Ok(store.select_rows(&(0..n).collect::<Vec<_>>())?)
}

pub fn learn_pq(a: LearnPq) -> Result<()> {
    let train = first_rows(&load(&a.train, &a.ingest)?, a.max_train)?;
    let start = Instant::now();
    let cb = learn_pq_codebook(&train, a.subdim, a.centroids, a.iterations, a.seed)?;
    cb.write(&a.out)?;
    println!(
        "codebook {}: {} blocks × {} centroids × {} dims, trained on {} vectors in {:.1}s",
        a.out.display(),
        cb.num_blocks(),
        cb.num_centroids(),
        cb.subdim(),
        train.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn encode(a: Encode) -> Result<()> {
    let cb = PqCodebook::load(&a.codebook)?;
    let store = load(&a.input, &a.ingest)?;
    let codes = cb.encode_store(&store)?;
    codes.write(&a.out)?;
    println!(
        "codes {}: {} vectors × {} bytes = {} bytes ({:.1} MiB)",
        a.out.display(),
        codes.len(),
        codes.num_blocks(),
        codes.payload_bytes(),
        mib(codes.payload_bytes())
    );
    Ok(())
}

pub fn binarize(a: Binarize) -> Result<()> {
    let store = load(&a.input, &a.ingest)?;
    let center = match &a.center_from {
        Some(p) => load(p, &a.ingest)?.mean(),
        None => store.mean(),
    };
    let frame = make_tight_frame(store.dim(), a.bits, a.seed)?;
    let codec = BinaryCodec::new(frame, center)?;
    let codes = codec.binarize_store(&store)?;
    codec.write(&a.frame_out)?;
    codes.write(&a.out)?;
    println!(
        "codes {}: {} vectors × {} bits = {} bytes ({:.1} MiB)",
        a.out.display(),
        codes.len(),
        codes.bits(),
        codes.payload_bytes(),
        mib(codes.payload_bytes())
    );
    Ok(())
}

impl BatchArgs {
    fn config(&self) -> BatchConfig {
        BatchConfig {
            c: self.c,
            epochs: self.epochs,
            seed: self.seed,
            intercept: !self.no_intercept,
        }
    }
}

pub fn train_batch(a: TrainBatch) -> Result<()> {
    let pos = load(&a.positives, &a.ingest)?;
    let neg = load(&a.negatives, &a.ingest)?;
    let fit = otf_core::trainer::train_batch(&pos, &neg, &a.batch.config())?;
    fit.model.write(&a.out)?;
    println!(
        "model {}: lambda {:.3e}, objective {:.6} (best seen {:.6}), intercept {:.4}, margin violations {} of {}",
        a.out.display(),
        fit.lambda,
        fit.objective,
        fit.best_objective,
        fit.intercept,
        hinge_violations(fit.model.weights(), fit.intercept, &pos, &neg),
        pos.len() + neg.len()
    );
    Ok(())
}

fn open_repository(a: &RepoArgs) -> Result<Repository> {
    repository_from(a, load(&a.repo, &a.ingest)?)
}

/// Builds the representation the flags ask for from the dense store.
fn repository_from(a: &RepoArgs, store: FeatureStore) -> Result<Repository> {
    let repo = if let Some(cb_path) = &a.codebook {
        let cb = PqCodebook::load(cb_path)?;
        match &a.codes {
            Some(p) => Repository::pq_from_codes(
                cb,
                PqCodes::load(p)?,
                store.ids().to_vec(),
                store.names().map(<[String]>::to_vec),
            )?,
            None => Repository::pq(&store, cb)?,
        }
    } else if let Some(frame_path) = &a.frame {
        let codec = BinaryCodec::load(frame_path)?;
        match &a.binary_codes {
            Some(p) => Repository::binary_from_codes(
                codec,
                BinaryCodes::load(p)?,
                store.ids().to_vec(),
                store.names().map(<[String]>::to_vec),
            )?,
            None => Repository::binary(&store, codec)?,
        }
    } else {
        Repository::dense(store)
    };
    tracing::info!(
        "repository: {} vectors, {} representation, {:.1} MiB payload",
        repo.len(),
        repo.representation().as_str(),
        mib(repo.payload_bytes())
    );
    Ok(repo)
}

fn load_labels(explicit: &Option<std::path::PathBuf>, repo: &Path) -> Result<LabelSet> {
    let path = explicit.clone().unwrap_or_else(|| labels_sidecar(repo));
    LabelSet::load(&path).with_context(|| format!("loading labels {}", path.display()))
}

fn open_corpus(path: &Path, rate: f64, ingest: &Ingest) -> Result<CorpusSource> {
    Ok(corpus_source(path, rate)
        .with_context(|| format!("scanning corpus {}", path.display()))?
        .with_load_options(ingest.options()))
}

/// Pairs every labeled repository class with its corpus training file and
/// returns the training positives with the matching labels.
fn training_classes(
    labels: &LabelSet,
    corpus: &Path,
    ingest: &Ingest,
    only: &[String],
) -> Result<(BTreeMap<String, FeatureStore>, LabelSet)> {
    let source = open_corpus(corpus, 12.0, ingest)?;
    let available: BTreeSet<String> = source.classes().into_iter().collect();
    let mut train = BTreeMap::new();
    for class in labels.class_names() {
        if !only.is_empty() && !only.contains(&class) {
            continue;
        }
        if !available.contains(&class) {
            tracing::warn!("class {class} has no training file in the corpus; skipped");
            continue;
        }
        train.insert(class.clone(), source.load_class(&class)?);
    }
    for class in only {
        if !train.contains_key(class) {
            bail!("class {class:?} needs both labels and a corpus file");
        }
    }
    if train.is_empty() {
        bail!("no class has both labels and a corpus file");
    }
    let mut test_labels = LabelSet::new();
    for (class, ids) in labels.classes() {
        if train.contains_key(class) {
            ids.iter().for_each(|&id| test_labels.insert(class, id));
        }
    }
    Ok((train, test_labels))
}

pub fn evaluate(a: Evaluate) -> Result<()> {
    let store = load(&a.repo.repo, &a.repo.ingest)?;
    let repo = Arc::new(repository_from(&a.repo, store.clone())?);
    let labels = load_labels(&a.labels, &a.repo.repo)?;
    labels.validate(&store)?;
    let (train, test_labels) = training_classes(&labels, &a.corpus, &a.repo.ingest, &[])?;
    let scenario = Scenario {
        train,
        negatives: load(&a.negatives, &a.repo.ingest)?,
        test: store,
        test_labels,
    };
    let excluded = match &a.exclude {
        Some(p) => read_ids(p)?,
        None => HashSet::new(),
    };
    let trainer = match a.online {
        Some(duration) => TrainerSpec::Online {
            session: SessionConfig {
                rate: a.rate,
                trainer: TrainerConfig {
                    lambda: a.lambda,
                    seed: a.batch.seed,
                    ..Default::default()
                },
                ranker: RankerConfig { k: a.k, ..Default::default() },
                clock: ClockMode::Simulated { speed: 1.0 },
                ..Default::default()
            },
            duration,
        },
        None => TrainerSpec::Batch(a.batch.config()),
    };
    let cfg = ScenarioConfig {
        k: a.k,
        trainer,
        excluded,
    };
    let report = run_scenario(&scenario, &repo, &cfg)?;
    let text = if a.json { report.to_json() } else { report.to_tsv() };
    match &a.out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn read_ids(path: &Path) -> Result<HashSet<u64>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.parse::<u64>().with_context(|| format!("bad id {l:?} in {}", path.display())))
        .collect()
}

impl SessionArgs {
    fn config(&self, clock: ClockMode) -> SessionConfig {
        SessionConfig {
            trainer: TrainerConfig {
                lambda: self.lambda,
                batch_size: self.batch_size,
                seed: self.seed,
                average: self.average,
                ..Default::default()
            },
            ranker: RankerConfig { k: self.k, tau: self.tau },
            rate: self.rate,
            steps_per_second: self.steps_per_second,
            clock,
        }
    }
}

pub fn convergence(a: Convergence) -> Result<()> {
    let store = load(&a.repo.repo, &a.repo.ingest)?;
    let labels = load_labels(&a.labels, &a.repo.repo)?;
    labels.validate(&store)?;
    let repo = Arc::new(repository_from(&a.repo, store)?);
    let (train, test_labels) = training_classes(&labels, &a.corpus, &a.repo.ingest, &a.classes)?;
    let negatives = Arc::new(repo.embed_store(&load(&a.negatives, &a.repo.ingest)?)?);
    let ctx = SessionContext::new(repo, negatives)?;
    let cfg = ConvergenceConfig {
        session: a.session.config(ClockMode::Simulated { speed: 1.0 }),
        duration: a.duration,
    };
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir)?;
    }
    println!("class\tfinal_prec_at_k\tt95_seconds\tpositives_fed");
    for (class, train) in &train {
        let feed = StoreFeed::new(class.as_str(), Arc::new(train.clone()));
        let positives = test_labels.class(class).expect("labels cover every class");
        let trace = run_convergence(ctx.clone(), Box::new(feed), positives, &cfg)?;
        let t95 = trace
            .time_to_fraction(0.95)
            .map_or_else(|| "-".to_owned(), |t| format!("{t:.3}"));
        let fed = trace.points.last().map_or(0, |p| p.positives_fed);
        println!("{class}\t{:.4}\t{t95}\t{fed}", trace.final_precision());
        if let Some(dir) = &a.out_dir {
            fs::write(dir.join(format!("{class}.tsv")), trace.to_tsv())?;
        }
    }
    Ok(())
}

pub fn serve(a: Serve) -> Result<()> {
    let repo = open_repository(&a.repo)?;
    let negatives = load(&a.negatives, &a.repo.ingest)?;
    let source = Arc::new(open_corpus(&a.corpus, a.session.rate, &a.repo.ingest)?);
    let clock = match a.simulated_speed {
        Some(speed) => ClockMode::Simulated { speed },
        None => ClockMode::Wall,
    };
    let cfg = ServiceConfig {
        session: a.session.config(clock),
        max_sessions: a.max_sessions,
        ttl: Duration::from_secs(a.ttl_secs),
    };
    tracing::info!("corpus classes: {}", source.classes().join(", "));
    let service = Arc::new(RetrievalService::new(repo, &negatives, source, cfg)?);
    drop(negatives);

    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .with_context(|| format!("binding {}", a.addr))?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        };
        otf_server::serve(listener, service, shutdown).await?;
        Ok(())
    })
}

fn median_secs(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

pub fn bench_rank(a: BenchRank) -> Result<()> {
    let store = match &a.repo {
        Some(p) => load(p, &Ingest { raw: false })?,
        None => {
            let cfg = SynthConfig {
                dim: a.dim,
                classes: 0,
                per_class: 0,
                distractors: a.count,
                seed: a.seed,
                ..Default::default()
            };
            generate_synthetic(&cfg)?.0
        }
    };
    let n = store.len();
    let dim = store.dim();
    let train = first_rows(&store, 10_000)?;
    let model = |dim: usize| {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
        LinearModel::from_weights((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
    };

    let mut repos = Vec::new();
    if let Some(subdim) = a.pq_subdim {
        let cb = learn_pq_codebook(&train, subdim, 256, 25, a.seed)?;
        repos.push(Repository::pq(&store, cb)?);
    }
    if let Some(bits) = a.bits {
        let codec = BinaryCodec::new(make_tight_frame(dim, bits, a.seed)?, train.mean())?;
        repos.push(Repository::binary(&store, codec)?);
    }
    repos.insert(0, Repository::dense(store));

    println!("representation\tvectors\tdim\tk\tseconds\tvectors_per_second\tpayload_bytes");
    for repo in &repos {
        let model = model(repo.model_dim());
        let secs = median_secs(a.repeats, || {
            repo.rank(&model, a.k, None, 0.0)?;
            Ok(())
        })?;
        println!(
            "{}\t{n}\t{dim}\t{}\t{secs:.4}\t{:.0}\t{}",
            repo.representation().as_str(),
            a.k,
            n as f64 / secs,
            repo.payload_bytes()
        );
    }
    Ok(())
}
