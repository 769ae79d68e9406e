//! Full-catalog ranking metrics, score smoothness, and subgroup reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::{bucket_for, pad_truncate, EvalSplit, FrequencyBucket, InteractionSequence, LengthBucket};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];
pub const NDCG_KS: [usize; 2] = [5, 10];
pub const DEFAULT_TOP_N: usize = 40;

/// How scores equal to the target's are counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TieBreak {
    /// Ties rank below the target.
    #[default]
    Optimistic,
    /// Ties rank above the target.
    Pessimistic,
    /// Average of the two.
    Mid,
}

/// 1-based rank of `scores[target]`.
pub fn rank_of(scores: &[f64], target: usize, tie: TieBreak) -> f64 {
    let s = scores[target];
    let greater = scores.iter().filter(|&&v| v > s).count();
    let equal_others = scores.iter().filter(|&&v| v == s).count() - 1;
    match tie {
        TieBreak::Optimistic => (1 + greater) as f64,
        TieBreak::Pessimistic => (1 + greater + equal_others) as f64,
        TieBreak::Mid => 1.0 + greater as f64 + equal_others as f64 / 2.0,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RankMetrics {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub count: usize,
}

impl RankMetrics {
    pub fn from_ranks(ranks: &[f64]) -> Self {
        let n = ranks.len().max(1) as f64;
        let recall = RECALL_KS
            .iter()
            .map(|&k| (k, ranks.iter().filter(|&&r| r <= k as f64).count() as f64 / n))
            .collect();
        let ndcg = NDCG_KS
            .iter()
            .map(|&k| (k, ranks.iter().filter(|&&r| r <= k as f64).map(|r| 1.0 / (r + 1.0).log2()).sum::<f64>() / n))
            .collect();
        let mrr = ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n;
        Self { recall, ndcg, mrr, count: ranks.len() }
    }
}

/// Ranks each user's target (an item index, `1..=item_count`) against the
/// whole catalog. `scores` is `[U, item_count]` with column `i` for item `i+1`.
pub fn target_ranks(scores: &Tensor, targets: &[usize], tie: TieBreak) -> Result<Vec<f64>> {
    if scores.rows() != targets.len() {
        return Err(Error::DimensionMismatch(scores.rows(), targets.len()));
    }
    let n = scores.cols();
    targets
        .iter()
        .enumerate()
        .map(|(u, &t)| {
            if t == 0 || t > n {
                return Err(Error::IndexOutOfRange { index: t, limit: n });
            }
            Ok(rank_of(scores.row(u), t - 1, tie))
        })
        .collect()
}

pub fn rank_metrics(scores: &Tensor, targets: &[usize], tie: TieBreak) -> Result<RankMetrics> {
    Ok(RankMetrics::from_ranks(&target_ranks(scores, targets, tie)?))
}

/// Mean absolute percentage change between consecutive top scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AvgChange {
    pub value: f64,
    /// Constant added to the top scores to make them positive (0 if none).
    pub shift: f64,
}

/// `100/(N−1) · Σ_{i=1}^{N−1} |s_{i+1} − s_i| / s_i` over the `top_n` largest
/// scores in descending order. When any of them is `≤ 0`, all are shifted by
/// `1 − min` first.
pub fn avg_change(scores: &[f64], top_n: usize) -> Result<AvgChange> {
    if top_n < 2 {
        return Err(Error::InvalidArgument(format!("top_n must be at least 2, got {top_n}")));
    }
    if scores.len() < top_n {
        return Err(Error::InvalidArgument(format!("{} candidates, need at least {top_n}", scores.len())));
    }
    let mut top = scores.to_vec();
    top.sort_by(|a, b| b.total_cmp(a));
    top.truncate(top_n);
    let min = top[top_n - 1];
    let shift = if min <= 0.0 { 1.0 - min } else { 0.0 };
    let sum: f64 = top.windows(2).map(|w| ((w[1] + shift) - (w[0] + shift)).abs() / (w[0] + shift)).sum();
    Ok(AvgChange { value: sum * 100.0 / (top_n - 1) as f64, shift })
}

/// Padded inputs and targets for every user with an example on `split`.
pub struct SplitExamples {
    pub ids: Vec<usize>,
    pub targets: Vec<usize>,
    /// Position of each example's user in the sequence list.
    pub rows: Vec<usize>,
}

pub fn split_examples(sequences: &[InteractionSequence], split: EvalSplit, max_len: usize) -> SplitExamples {
    let mut out = SplitExamples { ids: Vec::new(), targets: Vec::new(), rows: Vec::new() };
    for (r, s) in sequences.iter().enumerate() {
        if let Some((input, target)) = split.example(s) {
            out.ids.extend(pad_truncate(input, max_len));
            out.targets.push(target);
            out.rows.push(r);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub top_n: usize,
    pub tie: TieBreak,
    pub t_infer: usize,
    pub batch_size: usize,
    pub per_step: bool,
    pub subgroups: bool,
    /// Count validation targets as training occurrences for frequency buckets.
    pub count_valid: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            top_n: DEFAULT_TOP_N,
            tie: TieBreak::Optimistic,
            t_infer: 0,
            batch_size: 256,
            per_step: true,
            subgroups: true,
            count_valid: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubgroupMetrics {
    pub recall10: f64,
    pub ndcg10: f64,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub split: EvalSplit,
    pub metrics: RankMetrics,
    pub avg_change: f64,
    /// Users whose top scores had to be shifted positive.
    pub shifted_users: usize,
    pub per_step_avg_change: BTreeMap<usize, f64>,
    /// Keyed `length.<bucket>` / `frequency.<bucket>`; empty buckets absent.
    pub subgroup: BTreeMap<String, SubgroupMetrics>,
}

fn for_chunks(
    model: &Model,
    ids: &[usize],
    batch_size: usize,
    mut f: impl FnMut(usize, &[usize], usize) -> Result<()>,
) -> Result<()> {
    let l = model.config().max_len;
    let users = ids.len() / l;
    let mut start = 0;
    while start < users {
        let end = (start + batch_size.max(1)).min(users);
        f(start, &ids[start * l..end * l], end - start)?;
        start = end;
    }
    Ok(())
}

/// Ranks of every example's target at step `t`.
pub fn ranks_at(model: &Model, ex: &SplitExamples, t: usize, tie: TieBreak, batch_size: usize) -> Result<Vec<f64>> {
    let mut ranks = Vec::with_capacity(ex.targets.len());
    for_chunks(model, &ex.ids, batch_size, |start, ids, b| {
        let scores = model.predict_scores(ids, b, t)?;
        ranks.extend(target_ranks(&scores, &ex.targets[start..start + b], tie)?);
        Ok(())
    })?;
    Ok(ranks)
}

/// Validation MRR over the full catalog.
pub fn validation_mrr(model: &Model, sequences: &[InteractionSequence], t_infer: usize) -> Result<f64> {
    let ex = split_examples(sequences, EvalSplit::Valid, model.config().max_len);
    let ranks = ranks_at(model, &ex, t_infer, TieBreak::Optimistic, 256)?;
    Ok(RankMetrics::from_ranks(&ranks).mrr)
}

/// Mean Avg.Change over users at every step `0..=T`, scoring with the
/// deterministic mean at the last position.
pub fn per_step_analysis(model: &Model, ids: &[usize], top_n: usize, batch_size: usize) -> Result<BTreeMap<usize, f64>> {
    let steps = model.config().steps;
    let mut sums = vec![0.0; steps + 1];
    let mut users = 0usize;
    for_chunks(model, ids, batch_size, |_, chunk, b| {
        for (t, scores) in model.score_trajectory(chunk, b)?.iter().enumerate() {
            for u in 0..b {
                sums[t] += avg_change(scores.row(u), top_n)?.value;
            }
        }
        users += b;
        Ok(())
    })?;
    Ok(sums.into_iter().enumerate().map(|(t, s)| (t, s / users.max(1) as f64)).collect())
}

/// Recall@10 and NDCG@10 per length and frequency bucket. `ranks[i]`
/// belongs to the user with `lengths[i]` and `frequencies[i]`.
pub fn subgroup_report(
    ranks: &[f64],
    lengths: &[LengthBucket],
    frequencies: &[FrequencyBucket],
) -> BTreeMap<String, SubgroupMetrics> {
    let mut out = BTreeMap::new();
    let mut add = |key: String, members: Vec<f64>| {
        if members.is_empty() {
            return;
        }
        let m = RankMetrics::from_ranks(&members);
        out.insert(key, SubgroupMetrics { recall10: m.recall[&10], ndcg10: m.ndcg[&10], size: members.len() });
    };
    for b in LengthBucket::ALL {
        add(format!("length.{b}"), ranks.iter().zip(lengths).filter(|(_, l)| **l == b).map(|(r, _)| *r).collect());
    }
    for b in FrequencyBucket::ALL {
        add(format!("frequency.{b}"), ranks.iter().zip(frequencies).filter(|(_, f)| **f == b).map(|(r, _)| *r).collect());
    }
    out
}

pub fn evaluate(
    model: &Model,
    sequences: &[InteractionSequence],
    split: EvalSplit,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let ex = split_examples(sequences, split, model.config().max_len);
    if ex.targets.is_empty() {
        return Err(Error::InvalidArgument(format!("no {} examples to evaluate", split.name())));
    }
    let mut ranks = Vec::with_capacity(ex.targets.len());
    let mut change_sum = 0.0;
    let mut shifted_users = 0;
    for_chunks(model, &ex.ids, opts.batch_size, |start, ids, b| {
        let scores = model.predict_scores(ids, b, opts.t_infer)?;
        ranks.extend(target_ranks(&scores, &ex.targets[start..start + b], opts.tie)?);
        for u in 0..b {
            let c = avg_change(scores.row(u), opts.top_n)?;
            change_sum += c.value;
            shifted_users += usize::from(c.shift > 0.0);
        }
        Ok(())
    })?;
    if shifted_users > 0 {
        log::info!("avg_change: shifted the top-{} scores of {shifted_users} users to be positive", opts.top_n);
    }
    let per_step_avg_change =
        if opts.per_step { per_step_analysis(model, &ex.ids, opts.top_n, opts.batch_size)? } else { BTreeMap::new() };
    let subgroup = if opts.subgroups {
        let assign = bucket_for(sequences, split, opts.count_valid);
        let lengths: Vec<LengthBucket> = assign.iter().map(|a| a.length).collect();
        let freqs: Vec<FrequencyBucket> = assign.iter().map(|a| a.frequency).collect();
        subgroup_report(&ranks, &lengths, &freqs)
    } else {
        BTreeMap::new()
    };
    Ok(MetricsReport {
        split,
        avg_change: change_sum / ex.targets.len() as f64,
        shifted_users,
        metrics: RankMetrics::from_ranks(&ranks),
        per_step_avg_change,
        subgroup,
    })
}

impl MetricsReport {
    /// Flat `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let m = &self.metrics;
        let _ = writeln!(s, "split = {}", self.split.name());
        let _ = writeln!(s, "users = {}", m.count);
        for (k, v) in &m.recall {
            let _ = writeln!(s, "metric.recall@{k} = {v:.6}");
        }
        for (k, v) in &m.ndcg {
            let _ = writeln!(s, "metric.ndcg@{k} = {v:.6}");
        }
        let _ = writeln!(s, "metric.mrr = {:.6}", m.mrr);
        let _ = writeln!(s, "metric.avg_change = {:.6}", self.avg_change);
        let _ = writeln!(s, "avg_change.shifted_users = {}", self.shifted_users);
        for (t, v) in &self.per_step_avg_change {
            let _ = writeln!(s, "per_step.avg_change.t{t} = {v:.6}");
        }
        for (g, v) in &self.subgroup {
            let _ = writeln!(s, "subgroup.{g}.recall@10 = {:.6}", v.recall10);
            let _ = writeln!(s, "subgroup.{g}.ndcg@10 = {:.6}", v.ndcg10);
            let _ = writeln!(s, "subgroup.{g}.size = {}", v.size);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let m = &self.metrics;
        let mut s = format!("split: {} ({} users)\n\n", self.split.name(), m.count);
        let _ = writeln!(s, "{:<12} {:>10}", "metric", "value");
        for (k, v) in &m.recall {
            let _ = writeln!(s, "{:<12} {:>10.4}", format!("Recall@{k}"), v);
        }
        for (k, v) in &m.ndcg {
            let _ = writeln!(s, "{:<12} {:>10.4}", format!("NDCG@{k}"), v);
        }
        let _ = writeln!(s, "{:<12} {:>10.4}", "MRR", m.mrr);
        let _ = writeln!(s, "{:<12} {:>10.4}", "Avg.Change", self.avg_change);
        if !self.subgroup.is_empty() {
            let _ = writeln!(s, "\n{:<22} {:>8} {:>10} {:>10}", "subgroup", "size", "Recall@10", "NDCG@10");
            for (g, v) in &self.subgroup {
                let _ = writeln!(s, "{:<22} {:>8} {:>10.4} {:>10.4}", g, v.size, v.recall10, v.ndcg10);
            }
        }
        if !self.per_step_avg_change.is_empty() {
            let _ = writeln!(s, "\n{:<6} {:>10}", "t", "Avg.Change");
            for (t, v) in self.per_step_avg_change.iter().rev() {
                let _ = writeln!(s, "{:<6} {:>10.4}", t, v);
            }
        }
        s
    }

    /// Writes `metrics_<split>.txt`, `table_<split>.txt` and the two-column
    /// plot files into `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        let name = self.split.name();
        let mut files = vec![
            (format!("metrics_{name}.txt"), self.to_kv()),
            (format!("table_{name}.txt"), self.to_table()),
        ];
        if !self.per_step_avg_change.is_empty() {
            let mut dat = String::from("# t avg_change\n");
            for (t, v) in &self.per_step_avg_change {
                let _ = writeln!(dat, "{t} {v:.6}");
            }
            files.push((format!("per_step_{name}.dat"), dat));
        }
        for metric in ["recall@10", "ndcg@10"] {
            if self.subgroup.is_empty() {
                break;
            }
            let mut dat = format!("# subgroup {metric}\n");
            for (g, v) in &self.subgroup {
                let value = if metric == "recall@10" { v.recall10 } else { v.ndcg10 };
                let _ = writeln!(dat, "{} {value:.6}", g.replace(' ', "_"));
            }
            files.push((format!("subgroup_{}_{name}.dat", metric.replace('@', "")), dat));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (file, body) in files {
            let path = dir.join(file);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
