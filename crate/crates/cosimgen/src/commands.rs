//! The six commands, callable from the binary or from tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cosimgen_core::dataset::{ConditionVector, Dataset, PairTensor, PromptText, PROMPT_PREFIX};
use cosimgen_core::encoders::{HashedBagOfWords, SentenceBackend, TableBackend};
use cosimgen_core::metrics::{self, CoOccurrence, EvalItem, MetricsReport, RandomConvExtractor};
use cosimgen_core::model::CoSimGen;
use cosimgen_core::palette::{ClassMap, ClassPalette, DEFAULT_MIN_FRACTION};
use cosimgen_core::superres::{SrModel, SrTrainer};
use cosimgen_core::synthetic::{shapes_dataset, shapes_palette};
use cosimgen_core::trainer::{DiffusionTrainer, StepRecord};
use cosimgen_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::config::{resolve, RunConfig};
use crate::error::{format_err, io_err, usage, Result};
use crate::manifest::{load_dataset, load_manifest};
use crate::ndjson::NdjsonLog;
use crate::palette_file::{self, read_palette};
use crate::png;

pub const CHECKPOINT_FILE: &str = "checkpoint.csg";
pub const SR_CHECKPOINT_FILE: &str = "sr_checkpoint.csg";
pub const TRAIN_LOG: &str = "train.ndjson";
pub const SR_LOG: &str = "sr_train.ndjson";
pub const CACHE_ENV: &str = "COSIMGEN_CACHE";
pub const EXTRACTOR_SEED: u64 = 0x00c0_5e11;
pub const EXTRACTOR_SIZE: usize = 32;

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).map(PathBuf::from)
}

/// `hashed`, or `pretrained:<name>` read from `$COSIMGEN_CACHE/text/<name>.json`
/// (an object mapping prompt strings to embedding vectors).
pub fn text_backend(spec: &str) -> Result<Arc<dyn SentenceBackend>> {
    if spec == "hashed" {
        return Ok(Arc::new(HashedBagOfWords::default()));
    }
    let Some(name) = spec.strip_prefix("pretrained:") else {
        return Err(cosimgen_core::Error::Config(format!("unknown text backend {spec:?}")).into());
    };
    let dir = cache_dir().ok_or_else(|| cosimgen_core::Error::Config(format!("{spec} needs {CACHE_ENV} to point at cached embeddings")))?;
    let path = dir.join("text").join(format!("{name}.json"));
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let table: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text).map_err(|e| format_err(format!("{}: {e}", path.display())))?;
    Ok(Arc::new(TableBackend::new(name, table)?))
}

/// Fixed random extractor; weights in `$COSIMGEN_CACHE/extractor.csg` replace it when present.
pub fn extractor() -> Result<RandomConvExtractor> {
    let mut ext = RandomConvExtractor::new(EXTRACTOR_SEED, EXTRACTOR_SIZE);
    if let Some(path) = cache_dir().map(|d| d.join("extractor.csg")).filter(|p| p.is_file()) {
        let a = archive::read(&path)?;
        if a.kind != "extractor" {
            return Err(format_err(format!("{}: expected an extractor archive, found {}", path.display(), a.kind)));
        }
        ext.net.store.load_named(&a.tensors)?;
        ext.net.id = format!("cached:{}", a.meta.get("id").and_then(|v| v.as_str()).unwrap_or("extractor"));
    }
    Ok(ext)
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Dir(PathBuf),
    /// Procedural shapes: `count` samples drawn from `seed`.
    Synthetic { count: usize, seed: u64 },
}

impl DataSource {
    fn palette(&self) -> Result<ClassPalette> {
        match self {
            Self::Dir(root) => Ok(load_manifest(root)?.palette),
            Self::Synthetic { .. } => Ok(shapes_palette()),
        }
    }

    fn dataset(&self, resolution: usize) -> Result<Dataset> {
        match self {
            Self::Dir(root) => {
                let (d, warnings) = load_dataset(root, resolution)?;
                for w in warnings {
                    log::warn!("{w}");
                }
                Ok(d)
            }
            Self::Synthetic { count, seed } => Ok(shapes_dataset(*count, resolution, *seed)?),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub data: DataSource,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
}

fn resolved(data: &DataSource, config: Option<&Path>, overrides: &[String], seed: Option<u64>, steps: Option<usize>) -> Result<(RunConfig, ClassPalette)> {
    let palette = data.palette()?;
    let mut cfg = resolve(config, palette.num_classes(), overrides)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(s) = steps {
        cfg.train.steps = s;
        cfg.train.sr_steps = s;
    }
    Ok((cfg, palette))
}

fn save_diffusion(trainer: &DiffusionTrainer, palette: &ClassPalette, out: &Path) -> Result<()> {
    archive::write(&out.join(CHECKPOINT_FILE), &archive::diffusion_archive(&trainer.checkpoint(), palette))
}

/// Trains the diffusion model, logging every step and checkpointing every
/// `checkpoint_every` steps. A non-finite step aborts and leaves the last
/// good checkpoint in place.
pub fn cmd_train(a: &TrainArgs) -> Result<Vec<StepRecord>> {
    let (cfg, palette) = resolved(&a.data, a.config.as_deref(), &a.overrides, a.seed, a.steps)?;
    let data = a.data.dataset(cfg.train.model.resolution)?;
    if data.is_empty() {
        return Err(usage("no trainable samples"));
    }
    mkdir(&a.out)?;
    write_text(&a.out.join("config.toml"), &cfg.to_toml())?;
    write_text(&a.out.join("palette.json"), &palette_file::to_json(&palette))?;
    let backend = text_backend(&cfg.train.model.text_backend)?;
    let mut trainer = DiffusionTrainer::new(cfg.train.clone(), backend, palette.class_names().to_vec())?;
    save_diffusion(&trainer, &palette, &a.out)?;
    let mut log = NdjsonLog::create(&a.out.join(TRAIN_LOG))?;
    let mut records = Vec::new();
    let every = cfg.train.checkpoint_every.max(1);
    while trainer.step_count() < cfg.train.steps {
        let r = trainer.step(&data)?;
        log.write(&r)?;
        records.push(r);
        if trainer.step_count() % every == 0 || trainer.step_count() == cfg.train.steps {
            save_diffusion(&trainer, &palette, &a.out)?;
        }
    }
    Ok(records)
}

#[derive(Clone, Debug)]
pub struct TrainSrArgs {
    pub data: DataSource,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub scales: Option<Vec<usize>>,
}

#[derive(Serialize)]
struct SrLogLine<'a> {
    step: usize,
    #[serde(flatten)]
    report: &'a cosimgen_core::superres::SrReport,
}

fn hr_pairs(data: &DataSource, size: usize) -> Result<Vec<Tensor>> {
    data.dataset(size)?.samples.iter().map(|s| Ok(s.pair()?.into_tensor())).collect()
}

/// Trains the SR network on every scale in turn with shared weights.
pub fn cmd_train_sr(a: &TrainSrArgs) -> Result<usize> {
    let (mut cfg, _) = resolved(&a.data, a.config.as_deref(), &a.overrides, a.seed, a.steps)?;
    if let Some(s) = &a.scales {
        cfg.train.scales = s.clone();
    }
    if cfg.train.scales.is_empty() || cfg.train.scales.iter().any(|s| s % 2 != 0 || *s < 4) {
        return Err(usage(format!("scales must be even sizes of at least 4, got {:?}", cfg.train.scales)));
    }
    let scales = cfg.train.scales.iter().map(|&s| hr_pairs(&a.data, s)).collect::<Result<Vec<_>>>()?;
    if scales.iter().any(Vec::is_empty) {
        return Err(usage("no high-resolution samples"));
    }
    mkdir(&a.out)?;
    write_text(&a.out.join("config.toml"), &cfg.to_toml())?;
    let mut trainer = SrTrainer::new(cfg.sr_config())?;
    let path = a.out.join(SR_CHECKPOINT_FILE);
    archive::write(&path, &archive::sr_archive(&trainer.checkpoint()))?;
    let mut log = NdjsonLog::create(&a.out.join(SR_LOG))?;
    let every = cfg.train.checkpoint_every.max(1);
    for k in 0..cfg.train.sr_steps {
        let r = trainer.step_on(&scales[k % scales.len()])?;
        log.write(&SrLogLine { step: k, report: &r })?;
        if (k + 1) % every == 0 || k + 1 == cfg.train.sr_steps {
            archive::write(&path, &archive::sr_archive(&trainer.checkpoint()))?;
        }
    }
    Ok(trainer.step_count())
}

/// Class-vector or text conditioning; exactly one per invocation.
#[derive(Clone, Debug, PartialEq)]
pub enum Conditioning {
    Classes(Vec<String>),
    Prompt(String),
}

impl Conditioning {
    pub fn from_flags(prompt: Option<String>, classes: Option<Vec<String>>) -> Result<Self> {
        match (prompt, classes) {
            (Some(p), None) => Ok(Self::Prompt(p)),
            (None, Some(c)) => Ok(Self::Classes(c)),
            (Some(_), Some(_)) => Err(usage("give exactly one of --prompt or --classes, not both")),
            (None, None) => Err(usage("give exactly one of --prompt or --classes")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub conditioning: Conditioning,
    pub n: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub snapshot_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub conditioning: String,
    pub prompt: Option<String>,
    /// Queried classes; recovered from the prompt template for text conditioning when possible.
    pub classes: Option<Vec<String>>,
    pub condition_bits: Option<Vec<u8>>,
    pub seed: u64,
    pub steps: usize,
    pub decoded_classes: Vec<String>,
}

/// Resolves names (or numeric ids) against the palette.
pub fn parse_classes(names: &[String], palette: &ClassPalette) -> Result<ConditionVector> {
    let mut ids = Vec::new();
    for raw in names.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        let id = palette.class_index(raw).or_else(|| raw.parse::<usize>().ok().filter(|&k| k < palette.num_classes()));
        match id {
            Some(0) => return Err(usage("background cannot be queried")),
            Some(k) => ids.push(k),
            None => return Err(usage(format!("unknown class {raw:?}"))),
        }
    }
    if ids.is_empty() {
        return Err(usage("--classes lists no class"));
    }
    Ok(ConditionVector::from_classes(palette.num_classes(), ids)?)
}

/// Reads the class list back out of a templated prompt.
pub fn prompt_condition(prompt: &str, palette: &ClassPalette) -> Option<ConditionVector> {
    let body = prompt.strip_prefix(PROMPT_PREFIX)?;
    let names: Vec<String> = body.split(',').map(|s| s.trim().to_string()).collect();
    parse_classes(&names, palette).ok()
}

pub struct LoadedModel {
    pub model: CoSimGen,
    pub palette: ClassPalette,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let (ckpt, palette) = archive::diffusion_checkpoint(&archive::read(path)?)?;
    let backend = text_backend(&ckpt.config.model.text_backend)?;
    let trainer = DiffusionTrainer::from_checkpoint(&ckpt, backend)?;
    Ok(LoadedModel { model: trainer.model, palette })
}

/// Writes `<id>_image.png`, `<id>_mask.png` and `<id>_classmap.png` and returns the decoded map.
pub fn write_pair(out: &Path, id: &str, pair: &Tensor, palette: &ClassPalette) -> Result<ClassMap> {
    let (image, mask) = PairTensor::from_tensor(pair.clone())?.unpack();
    let map = palette.decode_tensor(&mask)?;
    png::write_image(&image, &out.join(format!("{id}_image.png")))?;
    png::write_image(&mask, &out.join(format!("{id}_mask.png")))?;
    png::write_class_map(&map, &out.join(format!("{id}_classmap.png")))?;
    Ok(map)
}

/// Draws `n` pairs; sample `i` uses seed `seed + i`, so outputs do not depend on `n`.
pub fn cmd_sample(a: &SampleArgs) -> Result<Vec<SampleMeta>> {
    let LoadedModel { model, palette } = load_model(&a.checkpoint)?;
    let (semantic, prompt, query, kind) = match &a.conditioning {
        Conditioning::Classes(names) => {
            let cond = parse_classes(names, &palette)?;
            (model.class_embedding(&cond)?, None, Some(cond), "class")
        }
        Conditioning::Prompt(p) => {
            let prompt = PromptText::new(p).map_err(|e| usage(e.to_string()))?;
            (model.text_embedding(&prompt)?, Some(p.clone()), prompt_condition(p, &palette), "text")
        }
    };
    mkdir(&a.out)?;
    let names = palette.class_names();
    let mut metas = Vec::with_capacity(a.n);
    for i in 0..a.n {
        let seed = a.seed.wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = model.sample(&semantic, 1, a.snapshot_every, &mut rng)?;
        let id = format!("{i:04}");
        let map = write_pair(&a.out, &id, &out.x0.batch_item(0)?.squeeze_batch()?, &palette)?;
        for snap in &out.snapshots {
            write_pair(&a.out, &format!("{id}_t{:04}", snap.step), &snap.x0_hat.batch_item(0)?.squeeze_batch()?, &palette)?;
        }
        let meta = SampleMeta {
            id: id.clone(),
            conditioning: kind.into(),
            prompt: prompt.clone(),
            classes: query.as_ref().map(|q| q.classes().map(|k| names[k].clone()).collect()),
            condition_bits: query.as_ref().map(|q| q.bits().iter().map(|&b| u8::from(b)).collect()),
            seed,
            steps: model.schedule.num_steps(),
            decoded_classes: map.classes_present(DEFAULT_MIN_FRACTION).into_iter().filter(|&k| k > 0).map(|k| names[k].clone()).collect(),
        };
        let mut json = serde_json::to_string_pretty(&meta).expect("meta serializes");
        json.push('\n');
        write_text(&a.out.join(format!("{id}_meta.json")), &json)?;
        metas.push(meta);
    }
    Ok(metas)
}

/// A generated or dataset pair found on disk.
#[derive(Clone, Debug)]
pub struct FoundPair {
    pub id: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub class_map: Option<PathBuf>,
    pub meta: Option<PathBuf>,
}

/// Lists pairs in either the dataset layout (`images/`, `masks/`) or the
/// sampler layout (`<id>_image.png` and siblings). Snapshot files are ignored.
pub fn find_pairs(dir: &Path) -> Result<Vec<FoundPair>> {
    if dir.join("images").is_dir() {
        let m = load_manifest(dir)?;
        return Ok(m
            .entries
            .into_iter()
            .map(|d| FoundPair { id: d.stem, image: d.image, mask: Some(d.mask), class_map: None, meta: None })
            .collect());
    }
    if !dir.is_dir() {
        return Err(usage(format!("{} is not a directory", dir.display())));
    }
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir).map_err(io_err(dir))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for path in entries {
        let Some(name) = path.file_name().and_then(|s| s.to_str()) else { continue };
        let Some(id) = name.strip_suffix("_image.png") else { continue };
        if is_snapshot(id) {
            continue;
        }
        let sib = |suffix: &str| Some(dir.join(format!("{id}{suffix}"))).filter(|p| p.is_file());
        out.push(FoundPair {
            id: id.to_string(),
            image: path.clone(),
            mask: sib("_mask.png"),
            class_map: sib("_classmap.png"),
            meta: sib("_meta.json"),
        });
    }
    Ok(out)
}

fn is_snapshot(id: &str) -> bool {
    id.rsplit_once("_t").is_some_and(|(_, s)| s.len() == 4 && s.bytes().all(|b| b.is_ascii_digit()))
}

fn read_class_map(p: &FoundPair, palette: &ClassPalette) -> Result<Option<ClassMap>> {
    if let Some(path) = &p.class_map {
        let (map, _) = png::read_mask(path, palette)?;
        return Ok(Some(map));
    }
    match &p.mask {
        Some(path) => Ok(Some(png::read_mask(path, palette)?.0)),
        None => Ok(None),
    }
}

fn eval_items(dir: &Path, palette: &ClassPalette) -> Result<Vec<EvalItem>> {
    let mut items = Vec::new();
    for p in find_pairs(dir)? {
        let image = png::read_image(&p.image)?;
        let class_map = read_class_map(&p, palette)?;
        if let Some(m) = &class_map {
            if (m.height, m.width) != (image.shape()[1], image.shape()[2]) {
                return Err(cosimgen_core::Error::Validation(format!("{}: image and mask sizes differ", p.id)).into());
            }
        }
        let query = match &p.meta {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(io_err(path))?;
                let meta: SampleMeta = serde_json::from_str(&text).map_err(|e| format_err(format!("{}: {e}", path.display())))?;
                meta.condition_bits.map(|b| ConditionVector::from_bits(b.into_iter().map(|v| v != 0).collect()))
            }
            None => None,
        };
        items.push(EvalItem { image, class_map, query });
    }
    Ok(items)
}

#[derive(Clone, Debug)]
pub struct EvaluateArgs {
    pub real: PathBuf,
    pub generated: PathBuf,
    pub palette: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
}

pub fn co_occurrence_csv(co: &CoOccurrence, names: &[String]) -> String {
    let mut s = String::from("queried");
    for n in names {
        s.push(',');
        s.push_str(n);
    }
    s.push_str(",defined\n");
    for (i, row) in co.matrix.iter().enumerate() {
        s.push_str(&names[i]);
        for v in row {
            s.push(',');
            if co.defined[i] {
                s.push_str(&v.to_string());
            }
        }
        s.push_str(if co.defined[i] { ",true\n" } else { ",false\n" });
    }
    s
}

/// Writes `metrics.json` and, when queries and masks are available, `co_occurrence.csv`.
pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<MetricsReport> {
    let palette = read_palette(&a.palette)?;
    let real = eval_items(&a.real, &palette)?;
    let generated = eval_items(&a.generated, &palette)?;
    if real.is_empty() || generated.is_empty() {
        return Err(usage(format!("no image pairs found ({} real, {} generated)", real.len(), generated.len())));
    }
    let ext = extractor()?;
    let names = palette.class_names().to_vec();
    let (report, co) = metrics::evaluate(&real, &generated, &names, &ext, DEFAULT_MIN_FRACTION, a.seed)?;
    mkdir(&a.out)?;
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    write_text(&a.out.join("metrics.json"), &json)?;
    if let Some(co) = co {
        write_text(&a.out.join("co_occurrence.csv"), &co_occurrence_csv(&co, &names))?;
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct SuperresArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
    pub times: usize,
    pub palette: Option<PathBuf>,
}

fn load_sr(path: &Path) -> Result<(SrModel, cosimgen_core::ParamStore)> {
    let t = SrTrainer::from_checkpoint(&archive::sr_checkpoint(&archive::read(path)?)?)?;
    Ok((t.model, t.store))
}

/// Upscales every pair in `input` by `2^times`, writing `<id>_x<factor>_*` files.
pub fn cmd_superres(a: &SuperresArgs) -> Result<usize> {
    if a.times == 0 {
        return Err(usage("--times must be at least 1"));
    }
    let (model, store) = load_sr(&a.checkpoint)?;
    let palette = a.palette.as_deref().map(read_palette).transpose()?;
    let pairs = find_pairs(&a.input)?;
    mkdir(&a.out)?;
    for p in &pairs {
        let image = png::read_image(&p.image)?;
        let mask = match &p.mask {
            Some(m) => png::read_image(m)?,
            None => return Err(usage(format!("{}: super-resolution needs the mask alongside the image", p.id))),
        };
        let pair = PairTensor::pack(&image, &mask)?;
        let outs = model.cascade(&store, pair.tensor(), a.times)?;
        let last = outs.last().expect("times >= 1");
        let id = format!("{}_x{}", p.id, 1usize << a.times);
        let (img, msk) = PairTensor::from_tensor(last.clone())?.unpack();
        png::write_image(&img, &a.out.join(format!("{id}_image.png")))?;
        png::write_image(&msk, &a.out.join(format!("{id}_mask.png")))?;
        if let Some(pal) = &palette {
            png::write_class_map(&pal.decode_tensor(&msk)?, &a.out.join(format!("{id}_classmap.png")))?;
        }
    }
    Ok(pairs.len())
}

/// Builds `palette.json`; reruns produce identical bytes.
pub fn cmd_palette(num_classes: Option<usize>, names: Option<&Path>, out: &Path) -> Result<ClassPalette> {
    let names = match (names, num_classes) {
        (Some(p), n) => palette_file::read_names(p, n)?,
        (None, Some(n)) => palette_file::default_names(n),
        (None, None) => return Err(usage("give --num-classes, --names, or both")),
    };
    let palette = ClassPalette::build(names.len(), &names)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    archive::write_atomic(out, palette_file::to_json(&palette).as_bytes())?;
    Ok(palette)
}
