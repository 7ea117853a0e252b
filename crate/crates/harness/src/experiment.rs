use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use randdisc::attack::{attack_examples, majority_vote_accuracy, AttackConfig, DefensePipeline, Transform};
use randdisc::certify::{certify, KlEstimation};
use randdisc::classifier::{accuracy, load_checkpoint, save_checkpoint, train_with_observer, Architecture, Model};
use randdisc::{Dataset, Image, RngStream};
use rayon::prelude::*;

use crate::data::{load_mnist_idx, load_pnm_dir, mnist_paths};
use crate::error::{Context, HarnessError, Result};
use crate::report::{CertificateRow, ReportRow, TimingRow};
use crate::spec::{DefenseName, ExperimentSpec};

/// Everything one run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub rows: Vec<ReportRow>,
    pub certificates: Vec<CertificateRow>,
    pub timings: Vec<TimingRow>,
}

/// Stable 64-bit id of a label, used to key random substreams.
fn label_id(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

const ATTACK_STREAM: u64 = 1;
const VOTE_STREAM: u64 = 2;
const CLEAN_STREAM: u64 = 3;
const CERTIFY_STREAM: u64 = 4;

/// The evaluation images: the first `subset` test images after a seeded
/// shuffle, or a PNM directory when configured.
pub fn evaluation_set(spec: &ExperimentSpec) -> Result<Dataset> {
    if let Some(dir) = &spec.data.pnm_dir {
        let set = load_pnm_dir(dir, spec.data.pnm_label, 10)?;
        return Ok(set.take(spec.data.subset));
    }
    let (img, lbl) = mnist_paths(&spec.data.mnist_dir, false);
    let test = load_mnist_idx(img, lbl)?;
    Ok(shuffled_subset(&test, spec.data.subset, spec.data.subset_seed))
}

pub fn shuffled_subset(set: &Dataset, count: usize, seed: u64) -> Dataset {
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut rng = RngStream::new(seed);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.below(i + 1));
    }
    order.truncate(count);
    set.select(&order)
}

/// Loads the checkpoint, training and saving it first when allowed.
pub fn obtain_model(spec: &ExperimentSpec, log: &mut dyn FnMut(&str)) -> Result<Model> {
    let path = &spec.model.checkpoint;
    if path.is_file() {
        return load_checkpoint(path).context(|| format!("loading {}", path.display()));
    }
    if !spec.model.train_if_missing {
        return Err(HarnessError::Usage(format!("checkpoint {} not found", path.display())));
    }
    let model = train_model(&spec.data.mnist_dir, &spec.model.train, log)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| output_error(parent, e))?;
    }
    save_checkpoint(&model, path).context(|| format!("saving {}", path.display()))?;
    Ok(model)
}

pub fn train_model(
    mnist_dir: &Path,
    cfg: &randdisc::classifier::TrainConfig,
    log: &mut dyn FnMut(&str),
) -> Result<Model> {
    let (img, lbl) = mnist_paths(mnist_dir, true);
    let train = load_mnist_idx(img, lbl)?;
    log(&format!("training on {} images for {} epochs", train.len(), cfg.epochs));
    let started = Instant::now();
    let mut window = 0.0;
    let model = train_with_observer(&train, Architecture::mnist_default(train.classes()), cfg, |p| {
        window += p.loss;
        if (p.batch + 1) % 100 == 0 {
            log(&format!(
                "epoch {} batch {}/{}: mean loss {:.4} ({:.0?})",
                p.epoch + 1,
                p.batch + 1,
                p.batches_per_epoch,
                window / 100.0,
                started.elapsed()
            ));
            window = 0.0;
        }
    })
    .context(|| "training".into())?;
    let (img, lbl) = mnist_paths(mnist_dir, false);
    if let Ok(test) = load_mnist_idx(img, lbl) {
        let acc = accuracy(&model, &test).context(|| "evaluating".into())?;
        log(&format!("test accuracy {acc:.4}"));
    }
    Ok(model)
}

pub(crate) fn output_error(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Output {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Runs the configured experiment on an already loaded model and
/// evaluation set. Nothing is written to disk.
pub fn evaluate(
    spec: &ExperimentSpec,
    model: &Model,
    examples: &Dataset,
    log: &mut dyn FnMut(&str),
) -> Result<ExperimentOutput> {
    spec.validate()?;
    let t = spec.transform.t;
    let root = RngStream::new(spec.seed);
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let clean_images: Vec<Image> = examples.iter().map(|e| e.image.clone()).collect();
    let estimation = KlEstimation {
        center_draws: spec.certify.center_draws,
        assignment_draws: spec.certify.assignment_draws,
        exact: true,
    };
    // adversarial images per (surrogate, ε): RandDisc and RandMix share theirs
    let mut adversarial_cache: HashMap<(String, u64), Vec<Image>> = HashMap::new();
    let mut clean_cache: HashMap<String, f64> = HashMap::new();
    let mut out = ExperimentOutput {
        rows: Vec::new(),
        certificates: Vec::new(),
        timings: Vec::new(),
    };
    for &defense in &spec.defenses {
        for &epsilon in &spec.attack.epsilons {
            let started = Instant::now();
            let transform = spec.transform_for(defense, epsilon)?;
            let pipeline = DefensePipeline::new(model, transform.clone()).context(|| defense.as_str().into())?;
            let surrogate = pipeline.surrogate(t);
            let name = defense.as_str();
            let eps_id = epsilon.to_bits();
            let ctx = || format!("{name} at ε = {epsilon}");

            let own_key = transform_key(&transform);
            let clean = match clean_cache.get(&own_key) {
                Some(&c) => c,
                None => {
                    let mut rng = root.derive(&[CLEAN_STREAM, label_id(&own_key)]);
                    let c =
                        majority_vote_accuracy(&pipeline, &clean_images, &labels, spec.votes, &mut rng).context(ctx)?;
                    clean_cache.insert(own_key, c);
                    c
                }
            };

            let cfg = AttackConfig {
                epsilon,
                eta: spec.eta_for(epsilon),
                steps: spec.attack.steps,
                grad_copies: spec.attack.grad_copies,
                loss: spec.attack.loss,
            };
            let key = (transform_key(surrogate.transform()), eps_id);
            if !adversarial_cache.contains_key(&key) {
                log(&format!(
                    "attacking {} at ε = {epsilon} through {}",
                    name,
                    surrogate.transform().name()
                ));
                let mut rng = root.derive(&[ATTACK_STREAM, label_id(&key.0), eps_id]);
                let adv = attack_examples(&surrogate, examples.examples(), &cfg, &mut rng).context(ctx)?;
                adversarial_cache.insert(key.clone(), adv);
            }
            let adversarial = &adversarial_cache[&key];
            let mut vote_rng = root.derive(&[VOTE_STREAM, label_id(name), eps_id]);
            let robust =
                majority_vote_accuracy(&pipeline, adversarial, &labels, spec.votes, &mut vote_rng).context(ctx)?;

            let certified = if spec.certify.enabled && defense.certifiable() {
                let cert_root = root.derive(&[CERTIFY_STREAM, label_id(name), eps_id]);
                let certs = examples
                    .examples()
                    .par_iter()
                    .enumerate()
                    .map(|(i, ex)| {
                        let mut rng = cert_root.substream(i as u64);
                        certify(
                            &ex.image,
                            ex.label,
                            &pipeline,
                            epsilon,
                            spec.certify.votes,
                            &estimation,
                            &mut rng,
                        )
                        .context(|| format!("certifying image {i} for {name} at ε = {epsilon}"))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let hits = certs.iter().filter(|c| c.certified).count();
                out.certificates.extend(
                    certs
                        .iter()
                        .enumerate()
                        .map(|(i, c)| CertificateRow::new(&spec.id, name, i, epsilon, c, spec.seed)),
                );
                Some(hits as f64 / examples.len() as f64)
            } else {
                None
            };
            log(&format!(
                "{name} ε = {epsilon}: clean {clean:.3} robust {robust:.3}{}",
                certified.map(|c| format!(" certified {c:.3}")).unwrap_or_default()
            ));
            out.rows.push(ReportRow {
                experiment: spec.id.clone(),
                defense: name.to_string(),
                epsilon,
                eta: cfg.eta,
                clean_accuracy: clean,
                robust_accuracy: robust,
                certified_accuracy: certified,
                seed: spec.seed,
            });
            out.timings.push(TimingRow {
                defense: name.to_string(),
                epsilon,
                wall_time_s: started.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(out)
}

/// Canonical text form of a transform (its TOML encoding).
fn transform_key(t: &Transform) -> String {
    #[derive(serde::Serialize)]
    struct Wrap<'a> {
        transform: &'a Transform,
    }
    toml::to_string(&Wrap { transform: t }).expect("transforms serialize")
}

/// Full run: validate, load data and model, evaluate, write the report
/// and its sidecars.
pub fn run_experiment(spec: &ExperimentSpec, log: &mut dyn FnMut(&str)) -> Result<Vec<ReportRow>> {
    spec.validate()?;
    spec.check_files()?;
    let examples = evaluation_set(spec)?;
    let model = obtain_model(spec, log)?;
    let out = evaluate(spec, &model, &examples, log)?;
    crate::report::write_outputs(spec, &out)?;
    Ok(out.rows)
}

/// Parses defense names as used on the command line.
pub fn defense_list(names: &[&str]) -> Result<Vec<DefenseName>> {
    names
        .iter()
        .map(|n| DefenseName::parse(n).ok_or_else(|| HarnessError::Usage(format!("unknown defense `{n}`"))))
        .collect()
}
