//! Synthetic tasks and speaker-partitioned federations.
//!
//! A task is labelled by a frozen random teacher with the student's block
//! architecture, so a task's teacher depth is directly comparable to a
//! student exit depth. Each speaker adds a fixed bias to every frame; the
//! teacher only sees the unbiased content, so the bias is pure nuisance that
//! still makes speaker-partitioned shards distributionally distinct.

mod shard_io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_batch, forward_to_depth, init_model, ExitSet, HeadKey, ModelConfig, ParameterSet};
use crate::numerics::{gaussian_fill, matmul, Prng, Tensor};

pub use shard_io::{decode_shard, encode_shard, read_shard, write_shard};

/// Sequences drawn to estimate class priors of a candidate teacher.
const CALIBRATION_SAMPLES: usize = 5000;
/// Candidates must sit this far inside the prior band so that sampling
/// noise in the estimate does not push the true priors outside it.
const BAND_MARGIN: f64 = 0.1;
const MAX_TEACHER_ATTEMPTS: usize = 100;
/// Bias corrections tried per candidate before it is discarded.
const BIAS_STEPS: usize = 200;
/// Calibration steps at full rate before the rate starts to decay.
const FIXED_BIAS_STEPS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    #[serde(default)]
    pub id: usize,
    pub name: String,
    pub classes: usize,
    /// Residual blocks in the labelling teacher.
    pub teacher_depth: usize,
    pub seq_len: usize,
    pub input_dim: usize,
    /// Task-optimal exit, used as the task-side depth cap.
    pub preferred_exit: usize,
    pub teacher_width: usize,
    pub teacher_hidden: usize,
    /// Multiplier on the teacher's block weights; larger is more nonlinear.
    #[serde(default = "default_teacher_gain")]
    pub teacher_gain: f64,
    #[serde(default)]
    pub teacher_features: TeacherFeatures,
}

/// Which half of the pooled teacher features its head reads.
///
/// The standard-deviation half is insensitive to a constant per-speaker
/// shift of the frames as long as the teacher is close to linear, so labels
/// stay learnable from biased frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherFeatures {
    Mean,
    #[default]
    Std,
    MeanStd,
}

fn default_teacher_gain() -> f64 {
    0.5
}

impl TaskSpec {
    pub fn validate(&self, exits: &ExitSet) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("task {}: classes must be >= 2", self.name)));
        }
        if self.teacher_depth < 1 || self.seq_len < 1 || self.input_dim < 1 {
            return Err(Error::Config(format!(
                "task {}: teacher_depth, seq_len and input_dim must be >= 1",
                self.name
            )));
        }
        if self.teacher_width < 1 || self.teacher_hidden < 1 {
            return Err(Error::Config(format!(
                "task {}: teacher width and hidden must be >= 1",
                self.name
            )));
        }
        if !exits.contains(self.preferred_exit) {
            return Err(Error::Config(format!(
                "task {}: preferred exit {} not in exit set {:?}",
                self.name,
                self.preferred_exit,
                exits.as_slice()
            )));
        }
        if !(self.teacher_gain > 0.0) || !self.teacher_gain.is_finite() {
            return Err(Error::Config(format!("task {}: teacher_gain must be > 0", self.name)));
        }
        Ok(())
    }
}

/// Named presets with the task-optimal exits of the speech benchmarks they stand in for.
pub fn task_preset(name: &str) -> Option<TaskSpec> {
    let (classes, teacher_depth, preferred_exit) = match name {
        "kws-like" => (4, 2, 6),
        "asr-like" => (2, 6, 9),
        "er-like" => (4, 5, 9),
        "sid-like" => (8, 4, 9),
        _ => return None,
    };
    Some(TaskSpec {
        id: 0,
        name: name.to_string(),
        classes,
        teacher_depth,
        seq_len: 8,
        input_dim: 4,
        preferred_exit,
        teacher_width: 8,
        teacher_hidden: 16,
        teacher_gain: 0.5,
        teacher_features: TeacherFeatures::Std,
    })
}

pub const TASK_PRESETS: [&str; 4] = ["kws-like", "asr-like", "er-like", "sid-like"];

/// Frozen labelling network for one task.
#[derive(Debug, Clone)]
pub struct Teacher {
    spec: TaskSpec,
    params: ParameterSet,
}

impl Teacher {
    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn label(&self, content: &Tensor) -> Result<usize> {
        let (logits, _) = forward_to_depth(&self.params, content, self.spec.teacher_depth, 0)?;
        Ok(argmax(logits.data()))
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn teacher_config(spec: &TaskSpec) -> ModelConfig {
    ModelConfig {
        input_dim: spec.input_dim,
        width: spec.teacher_width,
        hidden: spec.teacher_hidden,
        depth: spec.teacher_depth,
        exits: ExitSet::new(vec![spec.teacher_depth]).expect("single exit"),
        task_classes: vec![spec.classes],
    }
}

/// Empirical class frequencies of a teacher on fresh content.
pub fn class_priors(teacher: &Teacher, samples: usize, prng: &mut Prng) -> Result<Vec<f64>> {
    let spec = &teacher.spec;
    let content: Vec<Tensor> = (0..samples)
        .map(|_| gaussian_fill(prng, &[spec.seq_len, spec.input_dim]))
        .collect();
    let refs: Vec<&Tensor> = content.iter().collect();
    let (logits, _) = forward_batch(&teacher.params, &refs, spec.teacher_depth, 0)?;
    Ok(frequencies((0..samples).map(|i| argmax(logits.row(i))), spec.classes))
}

/// Every class frequency within `[0.5/C, 2/C]`.
pub fn priors_balanced(priors: &[f64]) -> bool {
    within_band(priors, 0.0)
}

fn within_band(priors: &[f64], margin: f64) -> bool {
    let c = priors.len() as f64;
    let (lo, hi) = ((0.5 + margin) / c, (2.0 - margin) / c);
    priors.iter().all(|&p| p >= lo && p <= hi)
}

/// Draws random teachers until one labels every class within `[0.5/C, 2/C]`.
///
/// The teacher head reads the pooled features selected by
/// `teacher_features`. Its bias starts centred on the mean pooled feature of a calibration sample
/// and is then nudged toward uniform class frequencies on that sample; the
/// priors are finally checked on fresh content.
pub fn make_teacher_task(spec: &TaskSpec, prng: &mut Prng) -> Result<Teacher> {
    let config = teacher_config(spec);
    config.validate()?;
    let key = HeadKey {
        exit: spec.teacher_depth,
        task: 0,
    };
    let classes = spec.classes;
    for _ in 0..MAX_TEACHER_ATTEMPTS {
        let mut params = init_model(&config, prng)?;
        for block in &mut params.blocks {
            block.w1.scale(spec.teacher_gain);
            block.w2.scale(spec.teacher_gain);
        }
        let mut calib = Prng::new(prng.next_u64());
        let content: Vec<Tensor> = (0..CALIBRATION_SAMPLES)
            .map(|_| gaussian_fill(&mut calib, &[spec.seq_len, spec.input_dim]))
            .collect();
        let refs: Vec<&Tensor> = content.iter().collect();
        let (_, tape) = forward_batch(&params, &refs, spec.teacher_depth, 0)?;
        let pooled = tape.pooled();
        let head = params.heads.get_mut(&key).expect("teacher head");
        let half = spec.teacher_width * classes;
        match spec.teacher_features {
            TeacherFeatures::Mean => head.w.data_mut()[half..].fill(0.0),
            TeacherFeatures::Std => head.w.data_mut()[..half].fill(0.0),
            TeacherFeatures::MeanStd => {}
        }
        let centre = pooled.sum_rows();
        let shift = matmul(&Tensor::new(vec![1, centre.len()], centre.into_data())?, &head.w)?;
        for (b, s) in head.b.data_mut().iter_mut().zip(shift.data()) {
            *b = -s / CALIBRATION_SAMPLES as f64;
        }
        let raw = matmul(pooled, &head.w)?;
        let scale = spread(raw.data());
        for step in 0..BIAS_STEPS {
            let mut logits = raw.clone();
            logits.add_row_vector(&head.b)?;
            let priors = frequencies((0..logits.rows()).map(|i| argmax(logits.row(i))), classes);
            if within_band(&priors, BAND_MARGIN) {
                break;
            }
            let rate = 0.5 * scale / (1.0 + step.saturating_sub(FIXED_BIAS_STEPS) as f64 / 10.0);
            for (b, p) in head.b.data_mut().iter_mut().zip(&priors) {
                *b -= rate * (p.max(0.1 / classes as f64) * classes as f64).ln();
            }
        }
        let teacher = Teacher {
            spec: spec.clone(),
            params,
        };
        let priors = class_priors(&teacher, CALIBRATION_SAMPLES, &mut calib)?;
        if within_band(&priors, BAND_MARGIN) {
            return Ok(teacher);
        }
    }
    Err(Error::Generation(format!(
        "task {}: no class-balanced teacher after {MAX_TEACHER_ATTEMPTS} attempts",
        spec.name
    )))
}

/// Standard deviation of `values`.
fn spread(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn frequencies(labels: impl Iterator<Item = usize>, classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    let mut n = 0;
    for l in labels {
        counts[l] += 1;
        n += 1;
    }
    counts.iter().map(|&c| c as f64 / n as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Speaker {
    pub id: u32,
    pub bias: Tensor,
    pub draw_scale: f64,
}

/// `count` speakers with biases `scale · N(0, 1)`.
pub fn make_speakers(count: usize, input_dim: usize, scale: f64, prng: &mut Prng) -> Vec<Speaker> {
    (0..count)
        .map(|id| {
            let mut bias = gaussian_fill(prng, &[input_dim]);
            bias.scale(scale);
            Speaker {
                id: id as u32,
                bias,
                draw_scale: scale,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frames: Tensor,
    pub label: usize,
    pub speaker: u32,
}

/// Frames are `N(0, 1)` content plus the speaker bias on every frame; the
/// label comes from the content alone.
pub fn sample_utterance(teacher: &Teacher, speaker: &Speaker, prng: &mut Prng) -> Result<Sample> {
    let spec = teacher.spec();
    let content = gaussian_fill(prng, &[spec.seq_len, spec.input_dim]);
    let label = teacher.label(&content)?;
    let mut frames = content;
    frames.add_row_vector(&speaker.bias)?;
    Ok(Sample {
        frames,
        label,
        speaker: speaker.id,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    NonIidBySpeaker,
    Iid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub client_id: u32,
    pub samples: Vec<Sample>,
    /// Speakers this client may draw from.
    pub speakers: Vec<u32>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Splits a federation into one shard per client.
///
/// Non-IID: speakers are shuffled and dealt into `sizes.len()` disjoint
/// groups; each client draws only from its group. IID: every sample picks
/// its speaker uniformly from all of them.
pub fn partition(
    teacher: &Teacher,
    speakers: &[Speaker],
    mode: PartitionMode,
    sizes: &[usize],
    prng: &mut Prng,
) -> Result<Vec<Shard>> {
    let k = sizes.len();
    if k == 0 {
        return Err(Error::Partition("no clients".into()));
    }
    if speakers.is_empty() {
        return Err(Error::Partition("no speakers".into()));
    }
    if mode == PartitionMode::NonIidBySpeaker && speakers.len() < k {
        return Err(Error::Partition(format!(
            "non-IID partition needs at least as many speakers ({}) as clients ({k})",
            speakers.len()
        )));
    }
    let groups: Vec<Vec<usize>> = match mode {
        PartitionMode::NonIidBySpeaker => {
            let mut order: Vec<usize> = (0..speakers.len()).collect();
            prng.shuffle(&mut order);
            let base = speakers.len() / k;
            let extra = speakers.len() % k;
            let mut groups = Vec::with_capacity(k);
            let mut cursor = 0;
            for c in 0..k {
                let take = base + usize::from(c < extra);
                let mut g = order[cursor..cursor + take].to_vec();
                g.sort_unstable();
                groups.push(g);
                cursor += take;
            }
            groups
        }
        PartitionMode::Iid => vec![(0..speakers.len()).collect(); k],
    };
    let mut shards = Vec::with_capacity(k);
    for (c, (&n, group)) in sizes.iter().zip(&groups).enumerate() {
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let speaker = &speakers[group[prng.below(group.len())]];
            samples.push(sample_utterance(teacher, speaker, prng)?);
        }
        shards.push(Shard {
            client_id: c as u32,
            samples,
            speakers: group.iter().map(|&s| speakers[s].id).collect(),
        });
    }
    Ok(shards)
}

/// Held-out set drawn uniformly over all speakers.
pub fn held_out(
    teacher: &Teacher,
    speakers: &[Speaker],
    count: usize,
    prng: &mut Prng,
) -> Result<Vec<Sample>> {
    (0..count)
        .map(|_| {
            let speaker = &speakers[prng.below(speakers.len())];
            sample_utterance(teacher, speaker, prng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> TaskSpec {
        task_preset("kws-like").unwrap()
    }

    #[test]
    fn teacher_is_deterministic() {
        let a = make_teacher_task(&spec(), &mut Prng::new(3)).unwrap();
        let b = make_teacher_task(&spec(), &mut Prng::new(3)).unwrap();
        let mut p = Prng::new(9);
        for _ in 0..50 {
            let x = gaussian_fill(&mut p, &[8, 4]);
            assert_eq!(a.label(&x).unwrap(), b.label(&x).unwrap());
        }
    }

    #[test]
    fn label_distribution_within_band() {
        for name in TASK_PRESETS {
            let s = task_preset(name).unwrap();
            let t = make_teacher_task(&s, &mut Prng::new(5)).unwrap();
            let priors = class_priors(&t, 10_000, &mut Prng::new(77)).unwrap();
            assert!(priors_balanced(&priors), "{name}: {priors:?}");
        }
    }

    #[test]
    fn zero_bias_speaker_leaves_content() {
        let t = make_teacher_task(&spec(), &mut Prng::new(1)).unwrap();
        let speaker = Speaker {
            id: 0,
            bias: Tensor::zeros(&[4]),
            draw_scale: 0.0,
        };
        let s = sample_utterance(&t, &speaker, &mut Prng::new(4)).unwrap();
        let content = gaussian_fill(&mut Prng::new(4), &[8, 4]);
        assert!(s.frames.bitwise_eq(&content));
    }

    #[test]
    fn bias_changes_frames_not_label() {
        let t = make_teacher_task(&spec(), &mut Prng::new(1)).unwrap();
        let speakers = make_speakers(2, 4, 1.0, &mut Prng::new(2));
        for seed in 0..20 {
            let a = sample_utterance(&t, &speakers[0], &mut Prng::new(seed)).unwrap();
            let b = sample_utterance(&t, &speakers[1], &mut Prng::new(seed)).unwrap();
            assert_eq!(a.label, b.label);
            assert!(a.frames.max_abs_diff(&b.frames) > 0.0);
        }
    }

    #[test]
    fn per_speaker_mean_tracks_bias() {
        let t = make_teacher_task(&spec(), &mut Prng::new(1)).unwrap();
        let speaker = &make_speakers(1, 4, 1.0, &mut Prng::new(6))[0];
        let n = 200;
        let mut prng = Prng::new(10);
        let mut sums = [0.0; 4];
        for _ in 0..n {
            let s = sample_utterance(&t, speaker, &mut prng).unwrap();
            for (acc, v) in sums.iter_mut().zip(s.frames.sum_rows().data()) {
                *acc += v;
            }
        }
        let frames = (n * 8) as f64;
        let bound = 3.0 / frames.sqrt();
        for (s, b) in sums.iter().zip(speaker.bias.data()) {
            assert!((s / frames - b).abs() < bound, "{} vs {b}", s / frames);
        }
    }

    #[test]
    fn non_iid_speakers_are_disjoint() {
        let t = make_teacher_task(&spec(), &mut Prng::new(1)).unwrap();
        let speakers = make_speakers(4, 4, 1.0, &mut Prng::new(2));
        let shards = partition(
            &t,
            &speakers,
            PartitionMode::NonIidBySpeaker,
            &[20, 20],
            &mut Prng::new(3),
        )
        .unwrap();
        assert!(shards[0].speakers.iter().all(|s| !shards[1].speakers.contains(s)));
        for shard in &shards {
            assert!(shard.samples.iter().all(|x| shard.speakers.contains(&x.speaker)));
        }
    }

    #[test]
    fn non_iid_needs_enough_speakers() {
        let t = make_teacher_task(&spec(), &mut Prng::new(1)).unwrap();
        let speakers = make_speakers(2, 4, 1.0, &mut Prng::new(2));
        let err = partition(
            &t,
            &speakers,
            PartitionMode::NonIidBySpeaker,
            &[5, 5, 5],
            &mut Prng::new(3),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Partition(_)));
    }

    #[test]
    fn shard_sizes_are_exact() {
        let t = make_teacher_task(&spec(), &mut Prng::new(1)).unwrap();
        let speakers = make_speakers(4, 4, 1.0, &mut Prng::new(2));
        let shards =
            partition(&t, &speakers, PartitionMode::Iid, &[100, 300], &mut Prng::new(3)).unwrap();
        assert_eq!(shards[0].len(), 100);
        assert_eq!(shards[1].len(), 300);
    }

    #[test]
    fn iid_speakers_are_uniform() {
        let t = make_teacher_task(&spec(), &mut Prng::new(1)).unwrap();
        let speakers = make_speakers(4, 4, 1.0, &mut Prng::new(2));
        let shards =
            partition(&t, &speakers, PartitionMode::Iid, &[400, 400], &mut Prng::new(3)).unwrap();
        for shard in &shards {
            let mut counts = [0f64; 4];
            for s in &shard.samples {
                counts[s.speaker as usize] += 1.0;
            }
            let expected = shard.len() as f64 / 4.0;
            let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
            // 99.9th percentile of chi-square with 3 degrees of freedom.
            assert!(chi2 < 16.27, "chi2 {chi2}");
        }
    }

    #[test]
    fn generation_is_a_pure_function_of_seed() {
        let build = || {
            let mut prng = Prng::new(21);
            let t = make_teacher_task(&spec(), &mut prng).unwrap();
            let speakers = make_speakers(6, 4, 1.0, &mut prng);
            partition(&t, &speakers, PartitionMode::NonIidBySpeaker, &[10, 12, 8], &mut prng)
                .unwrap()
        };
        assert_eq!(build(), build());
    }
}
