use serde::{Deserialize, Serialize};

use super::downstream::DownstreamTable;
use super::frechet::FrechetScores;
use super::metrics::alignment_dice;
use crate::error::Result;
use crate::phantom::PhantomSpec;
use crate::volume::{ImageVolume, MaskVolume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: u8,
    /// `None` when the label is absent from every scored pair.
    pub dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fidelity: Option<FrechetScores>,
    pub diversity: Option<f64>,
    pub alignment: Vec<LabelScore>,
    /// Mean over present non-background labels.
    pub alignment_mean: Option<f64>,
    pub downstream: Option<DownstreamTable>,
}

/// Per-label alignment Dice averaged over pairs (absent labels skipped).
pub fn mean_alignment(pairs: &[(&ImageVolume, &MaskVolume)], spec: &PhantomSpec) -> Result<(Vec<LabelScore>, Option<f64>)> {
    let per = crate::par::map(pairs, |(i, m)| alignment_dice(i, m, spec));
    let mut acc = vec![(0.0, 0usize); spec.labels];
    for d in per {
        for (l, v) in d? {
            if let (Some(v), Some(a)) = (v, acc.get_mut(l as usize)) {
                a.0 += v;
                a.1 += 1;
            }
        }
    }
    let scores: Vec<LabelScore> = acc.iter().enumerate().map(|(l, &(s, n))| LabelScore { label: l as u8, dice: (n > 0).then(|| s / n as f64) }).collect();
    let fg: Vec<f64> = scores.iter().filter(|s| s.label != 0).filter_map(|s| s.dice).collect();
    let mean = (!fg.is_empty()).then(|| fg.iter().sum::<f64>() / fg.len() as f64);
    Ok((scores, mean))
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(f) = &self.fidelity {
            s += "fidelity (Frechet proxy, lower is closer)\n";
            for (view, d) in &f.per_view {
                s += &format!("  {view:<10}{d:>12.4}\n");
            }
            s += &format!("  {:<10}{:>12.4}\n", "mean", f.mean);
        }
        if let Some(d) = self.diversity {
            s += &format!("diversity (mean pairwise |a-b|): {d:.4}\n");
        }
        if !self.alignment.is_empty() {
            s += "alignment Dice\n";
            for a in &self.alignment {
                let v = a.dice.map_or("absent".to_string(), |d| format!("{d:.4}"));
                s += &format!("  label {:<4}{v:>10}\n", a.label);
            }
            if let Some(m) = self.alignment_mean {
                s += &format!("  {:<10}{m:>10.4}\n", "mean fg");
            }
        }
        if let Some(t) = &self.downstream {
            s += "downstream segmentation Dice\n";
            s += &t.to_text();
        }
        s
    }
}
