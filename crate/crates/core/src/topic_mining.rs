//! Teacher topics from weighted multimodal kernel K-means.
//!
//! The kernel between two records is an additive combination of the cosine
//! similarity of their caption bag-of-words vectors and of their concatenated
//! feature vectors. Clustering runs Lloyd iterations in kernel space; soft
//! teacher distributions come from a softmax over negative, scale-normalized
//! kernel distances to each cluster.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{bag_of_words, BagOfWords, Corpus, Split};
use crate::error::{Error, Result};
use crate::numerics::{argmax, cosine, softmax_unchecked};

/// Per-record inputs to the combined kernel.
#[derive(Debug, Clone)]
pub struct KernelFeatures {
    pub bow: BagOfWords,
    pub visual: Vec<f64>,
}

/// `w_text·cos(bow_a, bow_b) + w_vis·cos(vis_a, vis_b)`.
pub fn combined_kernel(a: &KernelFeatures, b: &KernelFeatures, w_text: f64, w_vis: f64) -> f64 {
    w_text * a.bow.cosine(&b.bow) + w_vis * cosine(&a.visual, &b.visual)
}

/// Symmetric matrix of pairwise kernel values.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    n: usize,
    values: Vec<f64>,
}

impl KernelMatrix {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = f(i, j);
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        Self { n, values }
    }

    pub fn from_features(features: &[KernelFeatures], w_text: f64, w_vis: f64) -> Self {
        Self::from_fn(features.len(), |i, j| {
            combined_kernel(&features[i], &features[j], w_text, w_vis)
        })
    }

    /// Builds the kernel over the training split of `corpus`, returning the
    /// record ids in kernel order.
    pub fn from_corpus(corpus: &Corpus, w_text: f64, w_vis: f64) -> (Self, Vec<String>) {
        let stop = corpus.stopwords();
        let train: Vec<_> = corpus.split(Split::Train).collect();
        let feats: Vec<KernelFeatures> = train
            .iter()
            .map(|r| KernelFeatures {
                bow: bag_of_words(r, &stop),
                visual: r.features.concat(),
            })
            .collect();
        let ids = train.iter().map(|r| r.id.clone()).collect();
        (Self::from_features(&feats, w_text, w_vis), ids)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicAssignment {
    pub k: usize,
    pub hard_labels: Vec<usize>,
    pub teacher: Vec<Vec<f64>>,
    /// Within-cluster kernel distortion of `hard_labels`.
    pub objective: f64,
    /// Objective after each iteration of the winning restart.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

/// Result of one clustering run, before soft assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub labels: Vec<usize>,
    pub objective: f64,
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Kernel-space cluster statistics for a labelling.
struct ClusterStats {
    sizes: Vec<usize>,
    /// `Σ_{j,l∈C} κ(j,l) / |C|²`
    self_term: Vec<f64>,
    /// `sums[x][c] = Σ_{j∈C} κ(x,j)`
    sums: Vec<Vec<f64>>,
}

impl ClusterStats {
    fn new(kernel: &KernelMatrix, labels: &[usize], k: usize) -> Self {
        let n = kernel.len();
        let mut sizes = vec![0usize; k];
        for &l in labels {
            sizes[l] += 1;
        }
        let mut sums = vec![vec![0.0; k]; n];
        for (x, row) in sums.iter_mut().enumerate() {
            for (j, &l) in labels.iter().enumerate() {
                row[l] += kernel.get(x, j);
            }
        }
        let mut within = vec![0.0; k];
        for (j, &l) in labels.iter().enumerate() {
            within[l] += sums[j][l];
        }
        let self_term = within
            .iter()
            .zip(&sizes)
            .map(|(&w, &s)| if s == 0 { 0.0 } else { w / (s * s) as f64 })
            .collect();
        Self {
            sizes,
            self_term,
            sums,
        }
    }

    /// Squared kernel distance from point `x` to the center of cluster `c`.
    fn dist2(&self, kernel: &KernelMatrix, x: usize, c: usize) -> f64 {
        let s = self.sizes[c];
        if s == 0 {
            return f64::INFINITY;
        }
        let d = kernel.get(x, x) - 2.0 * self.sums[x][c] / s as f64 + self.self_term[c];
        d.max(0.0)
    }

    fn objective(&self, kernel: &KernelMatrix, labels: &[usize]) -> f64 {
        labels
            .iter()
            .enumerate()
            .map(|(x, &c)| self.dist2(kernel, x, c))
            .sum()
    }
}

/// Squared kernel distances of every point to every cluster center.
pub fn kernel_distances(kernel: &KernelMatrix, labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let stats = ClusterStats::new(kernel, labels, k);
    (0..kernel.len())
        .map(|x| (0..k).map(|c| stats.dist2(kernel, x, c)).collect())
        .collect()
}

/// Within-cluster kernel distortion of a labelling.
pub fn clustering_objective(kernel: &KernelMatrix, labels: &[usize], k: usize) -> f64 {
    ClusterStats::new(kernel, labels, k).objective(kernel, labels)
}

fn lloyd(kernel: &KernelMatrix, k: usize, max_iters: usize, rng: &mut ChaCha8Rng) -> Clustering {
    let n = kernel.len();
    let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    fill_empty(kernel, &mut labels, k);
    let mut stats = ClusterStats::new(kernel, &labels, k);
    let mut objective = stats.objective(kernel, &labels);
    let mut trace = vec![objective];
    let mut converged = false;

    for _ in 0..max_iters {
        let mut changed = false;
        let mut next = labels.clone();
        for (x, label) in next.iter_mut().enumerate() {
            let mut best = *label;
            let mut best_d = stats.dist2(kernel, x, best);
            for c in 0..k {
                let d = stats.dist2(kernel, x, c);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            if best != *label {
                *label = best;
                changed = true;
            }
        }
        if !changed {
            converged = true;
            break;
        }
        fill_empty(kernel, &mut next, k);
        labels = next;
        stats = ClusterStats::new(kernel, &labels, k);
        objective = stats.objective(kernel, &labels);
        trace.push(objective);
    }

    Clustering {
        labels,
        objective,
        trace,
        converged,
    }
}

/// Reseeds each empty cluster with the point farthest from its own center,
/// taking points only from clusters that keep at least one member.
fn fill_empty(kernel: &KernelMatrix, labels: &mut [usize], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let stats = ClusterStats::new(kernel, labels, k);
        let far = (0..labels.len())
            .filter(|&x| sizes[labels[x]] > 1)
            .max_by(|&a, &b| {
                stats
                    .dist2(kernel, a, labels[a])
                    .total_cmp(&stats.dist2(kernel, b, labels[b]))
                    .then(b.cmp(&a))
            });
        match far {
            Some(x) => labels[x] = empty,
            None => return,
        }
    }
}

/// Runs `restarts` independent Lloyd runs and keeps the lowest objective
/// (ties go to the earliest restart).
pub fn kernel_kmeans(kernel: &KernelMatrix, params: &KMeansParams) -> Result<Clustering> {
    let n = kernel.len();
    if params.k == 0 || params.k > n {
        return Err(Error::invalid(format!(
            "K = {} must lie in [1, n = {n}]",
            params.k
        )));
    }
    if params.restarts == 0 {
        return Err(Error::invalid("restarts must be at least 1"));
    }
    let mut best: Option<Clustering> = None;
    for restart in 0..params.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(restart as u64);
        let run = lloyd(kernel, params.k, params.max_iters, &mut rng);
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Soft teacher distributions `softmax(−d²(x, C_k) / (T·d̄))`, where `d̄` is
/// the mean distance of records to their own cluster.
pub fn soft_assign(
    kernel: &KernelMatrix,
    labels: &[usize],
    k: usize,
    temperature: f64,
) -> Result<Vec<Vec<f64>>> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::invalid("temperature must be positive"));
    }
    let dists = kernel_distances(kernel, labels, k);
    Ok(soft_assign_from_distances(&dists, labels, temperature))
}

pub fn soft_assign_from_distances(
    dists: &[Vec<f64>],
    labels: &[usize],
    temperature: f64,
) -> Vec<Vec<f64>> {
    let n = dists.len();
    let mean_own = if n == 0 {
        0.0
    } else {
        dists.iter().zip(labels).map(|(d, &l)| d[l]).sum::<f64>() / n as f64
    };
    dists
        .iter()
        .zip(labels)
        .map(|(d, &l)| {
            if mean_own <= 0.0 {
                let mut one_hot = vec![0.0; d.len()];
                one_hot[l] = 1.0;
                one_hot
            } else {
                let scale = temperature * mean_own;
                let logits: Vec<f64> = d
                    .iter()
                    .map(|&x| if x.is_finite() { -x / scale } else { -1e300 })
                    .collect();
                softmax_unchecked(&logits)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub k: usize,
    pub w_text: f64,
    pub w_vis: f64,
    pub temperature: f64,
    pub restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

/// Mined teacher topics for the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedTopics {
    pub config: MiningConfig,
    pub objective: f64,
    pub ids: Vec<String>,
    pub assignment: TopicAssignment,
}

impl MinedTopics {
    pub fn teacher_for(&self, id: &str) -> Option<&[f64]> {
        self.ids
            .iter()
            .position(|x| x == id)
            .map(|i| self.assignment.teacher[i].as_slice())
    }

    pub fn teacher_map(&self) -> std::collections::HashMap<String, Vec<f64>> {
        self.ids
            .iter()
            .cloned()
            .zip(self.assignment.teacher.iter().cloned())
            .collect()
    }
}

/// Mines topics over the training split of `corpus`.
pub fn mine_topics(corpus: &Corpus, config: &MiningConfig) -> Result<MinedTopics> {
    let (kernel, ids) = KernelMatrix::from_corpus(corpus, config.w_text, config.w_vis);
    let clustering = kernel_kmeans(
        &kernel,
        &KMeansParams {
            k: config.k,
            restarts: config.restarts,
            max_iters: config.max_iters,
            seed: config.seed,
        },
    )?;
    let teacher = soft_assign(&kernel, &clustering.labels, config.k, config.temperature)?;
    let hard_labels = if clustering.converged {
        clustering.labels.clone()
    } else {
        teacher.iter().map(|z| argmax(z)).collect()
    };
    let objective = clustering_objective(&kernel, &hard_labels, config.k);
    Ok(MinedTopics {
        config: *config,
        objective,
        ids,
        assignment: TopicAssignment {
            k: config.k,
            hard_labels,
            teacher,
            objective,
            objective_trace: clustering.trace,
            converged: clustering.converged,
        },
    })
}

#[derive(Serialize, Deserialize)]
struct TopicsHeader {
    k: usize,
    w_text: f64,
    w_vis: f64,
    temperature: f64,
    restarts: usize,
    max_iters: usize,
    seed: u64,
    objective: f64,
    converged: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopicLine {
    id: String,
    label: usize,
    topics: Vec<f64>,
}

pub fn save_topics(topics: &MinedTopics, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_topics(topics, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_topics<W: Write>(topics: &MinedTopics, w: &mut W) -> Result<()> {
    let c = &topics.config;
    let header = TopicsHeader {
        k: c.k,
        w_text: c.w_text,
        w_vis: c.w_vis,
        temperature: c.temperature,
        restarts: c.restarts,
        max_iters: c.max_iters,
        seed: c.seed,
        objective: topics.objective,
        converged: topics.assignment.converged,
    };
    let json = |e: serde_json::Error| Error::invalid(e.to_string());
    writeln!(w, "{}", serde_json::to_string(&header).map_err(json)?)?;
    for (i, id) in topics.ids.iter().enumerate() {
        let line = TopicLine {
            id: id.clone(),
            label: topics.assignment.hard_labels[i],
            topics: topics.assignment.teacher[i].clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&line).map_err(json)?)?;
    }
    Ok(())
}

pub fn load_topics(path: impl AsRef<Path>) -> Result<MinedTopics> {
    let path = path.as_ref();
    let mut lines = BufReader::new(File::open(path)?).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "missing header"))??;
    let h: TopicsHeader =
        serde_json::from_str(&first).map_err(|e| Error::parse(path, 1, e.to_string()))?;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut teacher = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TopicLine =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 2, e.to_string()))?;
        if t.topics.len() != h.k || t.label >= h.k {
            return Err(Error::parse(
                path,
                i + 2,
                format!("expected {} topics", h.k),
            ));
        }
        ids.push(t.id);
        labels.push(t.label);
        teacher.push(t.topics);
    }
    Ok(MinedTopics {
        config: MiningConfig {
            k: h.k,
            w_text: h.w_text,
            w_vis: h.w_vis,
            temperature: h.temperature,
            restarts: h.restarts,
            max_iters: h.max_iters,
            seed: h.seed,
        },
        objective: h.objective,
        ids,
        assignment: TopicAssignment {
            k: h.k,
            hard_labels: labels,
            teacher,
            objective: h.objective,
            objective_trace: vec![h.objective],
            converged: h.converged,
        },
    })
}
