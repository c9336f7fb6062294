//! On-disk dataset layout: `manifest.toml` plus one directory per subject
//! holding both modalities, their displacement fields and saliency maps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsm::JacobianSaliencyMap;
use crate::register::{read_field, write_field_as};
use crate::synthdata::{Dataset, PhantomSpec, Split, Subject};
use crate::volume::{read_volume, write_volume, VoxelType};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub seed: u64,
    pub marker_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub per_class: usize,
    pub test_fraction: f64,
    pub confounded: bool,
    pub phantom: PhantomSpec,
    pub subject: Vec<SubjectRecord>,
}

pub fn write_dataset(ds: &Dataset, manifest: &Manifest, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = toml::to_string(manifest).map_err(|e| Error::config(e.to_string()))?;
    fs::write(dir.join("manifest.toml"), text)?;
    for s in &ds.subjects {
        let sd = dir.join(&s.id);
        fs::create_dir_all(&sd)?;
        for m in 0..2 {
            write_volume(&s.modalities[m], sd.join(format!("image_m{m}.jsmv")))?;
            write_field_as(&s.fields[m], sd.join(format!("field_m{m}.jsmv")), VoxelType::F64x3)?;
            write_volume(s.jsms[m].volume(), sd.join(format!("jsm_m{m}.jsmv")))?;
        }
    }
    Ok(())
}

/// Manifest entries for `ds`.
pub fn manifest_for(ds: &Dataset, phantom: &PhantomSpec, per_class: usize, test_fraction: f64, confounded: bool) -> Manifest {
    Manifest {
        per_class,
        test_fraction,
        confounded,
        phantom: phantom.clone(),
        subject: ds
            .subjects
            .iter()
            .zip(&ds.splits)
            .map(|(s, &split)| SubjectRecord {
                id: s.id.clone(),
                label: s.label,
                split,
                seed: s.seed,
                marker_class: s.marker_class,
            })
            .collect(),
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.toml"))?;
    toml::from_str(&text).map_err(|e| Error::format(0, format!("manifest.toml: {e}")))
}

pub fn read_dataset(dir: &Path) -> Result<(Dataset, Manifest)> {
    let manifest = read_manifest(dir)?;
    let spec = &manifest.phantom;
    let mut subjects = Vec::with_capacity(manifest.subject.len());
    for r in &manifest.subject {
        let sd = dir.join(&r.id);
        let load = |m: usize| -> Result<_> {
            let image = read_volume(sd.join(format!("image_m{m}.jsmv")))?;
            let field = read_field(sd.join(format!("field_m{m}.jsmv")))?;
            let jsm = read_volume(sd.join(format!("jsm_m{m}.jsmv")))?;
            if image.dims() != spec.dims || field.dims() != spec.dims || jsm.dims() != spec.dims {
                return Err(Error::input(format!("subject {} does not match the phantom dims {:?}", r.id, spec.dims)));
            }
            Ok((image, field, JacobianSaliencyMap::new(jsm)))
        };
        let (i0, f0, j0) = load(0)?;
        let (i1, f1, j1) = load(1)?;
        let truth_mask = (0..i0.len()).map(|i| spec.in_atrophy_region(i0.coords(i))).collect();
        subjects.push(Subject {
            id: r.id.clone(),
            label: r.label,
            seed: r.seed,
            modalities: [i0, i1],
            fields: [f0, f1],
            jsms: [j0, j1],
            truth_mask,
            marker_class: r.marker_class,
        });
    }
    let splits = manifest.subject.iter().map(|r| r.split).collect();
    Ok((Dataset { subjects, splits }, manifest))
}
