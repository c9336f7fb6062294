//! Input-gradient saliency export for overlay plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::diffnet::input_gradient;
use crate::error::Result;
use crate::jal::{branch_input, FusionMode, Trained};
use crate::synthdata::Subject;
use crate::volume::{write_volume, Volume3D};

/// Ranks starting at 1; tied values share their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModalitySaliency {
    pub modality: usize,
    /// Largest `|g|` before normalisation.
    pub max_abs_gradient: f64,
    /// Spearman correlation of `|g|` with `|JSM - 1|` over all voxels.
    pub rank_correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaliencySummary {
    pub subject: String,
    pub label: usize,
    pub modalities: Vec<ModalitySaliency>,
}

/// `|g|` of each modality scaled to [0, 1], shaped like the subject's volumes.
pub fn saliency_volumes(trained: &Trained, subject: &Subject) -> Result<Vec<(Volume3D, f64)>> {
    let sample = subject.to_sample();
    let dims = subject.dims();
    let n = subject.modalities[0].len();
    let mut out = Vec::with_capacity(2);
    for m in 0..2 {
        let (branch, channel) = match trained.mode {
            FusionMode::Early => (0, m),
            FusionMode::Late => (m, 0),
        };
        let (x, _) = branch_input(&sample, trained.mode, branch)?;
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let g = input_gradient(&trained.models[branch], &x.reshaped(&shape))?;
        let abs: Vec<f64> = g.data()[channel * n..(channel + 1) * n].iter().map(|v| v.abs()).collect();
        let max = abs.iter().fold(0.0f64, |a, &b| a.max(b));
        let scaled = if max > 0.0 { abs.iter().map(|v| v / max).collect() } else { vec![0.0; n] };
        out.push((Volume3D::new(dims, subject.modalities[m].spacing(), scaled)?, max));
    }
    Ok(out)
}

fn slice_csv(vol: &Volume3D, plane: &str) -> String {
    let [w, h, d] = vol.dims();
    let (rows, cols, at): (usize, usize, Box<dyn Fn(usize, usize) -> f64>) = match plane {
        "axial" => (h, w, Box::new(|r, c| vol.get(c, r, d / 2))),
        "coronal" => (d, w, Box::new(|r, c| vol.get(c, h / 2, r))),
        _ => (d, h, Box::new(|r, c| vol.get(w / 2, c, r))),
    };
    let mut s = String::new();
    for r in 0..rows {
        let line: Vec<String> = (0..cols).map(|c| format!("{}", at(r, c))).collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    s
}

/// Writes per modality: the normalised gradient volume, the image and its
/// JSM, mid-slice CSV grids of all three, and a `saliency.toml` summary.
pub fn export_saliency(trained: &Trained, subject: &Subject, out_dir: &Path) -> Result<SaliencySummary> {
    fs::create_dir_all(out_dir)?;
    let mut modalities = Vec::new();
    for (m, (grad, max)) in saliency_volumes(trained, subject)?.into_iter().enumerate() {
        let jsm = subject.jsms[m].volume();
        let change: Vec<f64> = jsm.data().iter().map(|v| (v - 1.0).abs()).collect();
        let image = &subject.modalities[m];
        write_volume(&grad, out_dir.join(format!("gradient_m{m}.jsmv")))?;
        write_volume(jsm, out_dir.join(format!("jsm_m{m}.jsmv")))?;
        write_volume(image, out_dir.join(format!("image_m{m}.jsmv")))?;
        for plane in ["axial", "coronal", "sagittal"] {
            for (kind, vol) in [("gradient", &grad), ("jsm", jsm), ("image", image)] {
                fs::write(out_dir.join(format!("{kind}_m{m}_{plane}.csv")), slice_csv(vol, plane))?;
            }
        }
        modalities.push(ModalitySaliency {
            modality: m,
            max_abs_gradient: max,
            rank_correlation: spearman(grad.data(), &change),
        });
    }
    let summary = SaliencySummary { subject: subject.id.clone(), label: subject.label, modalities };
    let mut s = format!("subject = \"{}\"\nlabel = {}\n", summary.subject, summary.label);
    for m in &summary.modalities {
        let _ = write!(
            s,
            "\n[[modality]]\nindex = {}\nmax_abs_gradient = {:?}\nrank_correlation = {:?}\n",
            m.modality, m.max_abs_gradient, m.rank_correlation
        );
    }
    fs::write(out_dir.join("saliency.toml"), s)?;
    Ok(summary)
}
