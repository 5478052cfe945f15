//! Heterogeneous client dataset construction.
//!
//! Two split modes: per-domain assignment (feature heterogeneity) and
//! Dirichlet label splits (label heterogeneity), plus a generic
//! image-folder ingestion path. Splits partition the source exactly and
//! are deterministic given (seed, config).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;

use crate::benchmark::{GroupedDataset, GroupedExample};
use crate::error::{Error, Result};
use crate::types::{ClientDataset, Image, LabeledExample};

#[derive(Debug, Clone, Serialize)]
pub enum PartitionProvenance {
    Dirichlet { beta: f64, num_clients: usize },
    Domain { clients_per_domain: usize, shots_per_class: usize },
}

#[derive(Debug, Clone)]
pub struct Partition {
    pub clients: Vec<ClientDataset>,
    pub provenance: PartitionProvenance,
    /// Source example ids held by each client, for reproducibility audits.
    pub example_ids: Vec<Vec<usize>>,
}

impl Partition {
    /// JSON manifest: client_id -> example ids.
    pub fn manifest_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            provenance: &'a PartitionProvenance,
            clients: BTreeMap<u64, &'a Vec<usize>>,
        }
        let clients = self
            .clients
            .iter()
            .zip(&self.example_ids)
            .map(|(c, ids)| (c.client_id, ids))
            .collect();
        Ok(serde_json::to_string_pretty(&Manifest { provenance: &self.provenance, clients })?)
    }
}

/// Splits a flat labeled dataset across `k` clients with per-class
/// proportions drawn from Dir(beta * 1_k). Clients left empty by the draw
/// are repaired by moving one example from the largest client.
pub fn dirichlet_split(
    dataset: &[LabeledExample],
    k: usize,
    beta: f64,
    rng: &mut impl Rng,
) -> Result<Partition> {
    if beta <= 0.0 {
        return Err(Error::Config("dirichlet beta must be > 0".into()));
    }
    if k == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if dataset.len() < k {
        return Err(Error::Config(format!(
            "dataset of {} cannot cover {k} clients",
            dataset.len()
        )));
    }
    let num_classes = dataset.iter().map(|e| e.label).max().unwrap_or(0) + 1;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, e) in dataset.iter().enumerate() {
        by_class[e.label].push(i);
    }
    if by_class.iter().any(|c| c.is_empty()) {
        return Err(Error::Config("every class must be non-empty".into()));
    }

    let gamma = Gamma::new(beta, 1.0)
        .map_err(|e| Error::Config(format!("invalid beta: {e}")))?;
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); k];
    for ids in &mut by_class {
        ids.shuffle(rng);
        let mut props: Vec<f64> = (0..k).map(|_| gamma.sample(rng).max(1e-300)).collect();
        let total: f64 = props.iter().sum();
        for p in &mut props {
            *p /= total;
        }
        // Largest-remainder allocation of the class count.
        let n = ids.len();
        let raw: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
        let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let mut leftover = n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            let fa = raw[a] - raw[a].floor();
            let fb = raw[b] - raw[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &c in order.iter().cycle() {
            if leftover == 0 {
                break;
            }
            counts[c] += 1;
            leftover -= 1;
        }
        let mut offset = 0;
        for (client, &count) in counts.iter().enumerate() {
            assigned[client].extend_from_slice(&ids[offset..offset + count]);
            offset += count;
        }
    }

    // Empty-client repair: move one example from the current largest client.
    for i in 0..k {
        if assigned[i].is_empty() {
            let largest = (0..k)
                .max_by_key(|&j| assigned[j].len())
                .expect("k >= 1");
            let moved = assigned[largest].pop().ok_or_else(|| {
                Error::Config("cannot repair empty client: no donor examples".into())
            })?;
            assigned[i].push(moved);
        }
    }

    let clients = assigned
        .iter()
        .enumerate()
        .map(|(i, ids)| {
            let examples = ids.iter().map(|&ix| dataset[ix].clone()).collect();
            ClientDataset::new(i as u64, examples, None)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Partition {
        clients,
        provenance: PartitionProvenance::Dirichlet { beta, num_clients: k },
        example_ids: assigned,
    })
}

/// Assigns clients per domain: `clients_per_domain` clients each holding
/// exactly `shots_per_class` examples of every class from their domain.
pub fn domain_split(
    benchmark: &GroupedDataset,
    shots_per_class: usize,
    clients_per_domain: usize,
    rng: &mut impl Rng,
) -> Result<Partition> {
    if shots_per_class == 0 || clients_per_domain == 0 {
        return Err(Error::Config("shots_per_class and clients_per_domain must be >= 1".into()));
    }
    let d = benchmark.num_domains();
    let c = benchmark.num_classes();
    let mut clients = Vec::with_capacity(d * clients_per_domain);
    let mut example_ids = Vec::with_capacity(d * clients_per_domain);
    // Flat ids into benchmark.examples per (domain, class).
    let mut cell_ids: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); c]; d];
    for (i, e) in benchmark.examples.iter().enumerate() {
        cell_ids[e.domain][e.class].push(i);
    }
    for (domain, classes) in cell_ids.iter_mut().enumerate() {
        let needed = shots_per_class * clients_per_domain;
        for (class, ids) in classes.iter_mut().enumerate() {
            if ids.len() < needed {
                return Err(Error::Config(format!(
                    "cell (domain {domain}, class {class}) has {} examples, needs {needed}",
                    ids.len()
                )));
            }
            ids.shuffle(rng);
        }
        for j in 0..clients_per_domain {
            let mut ids = Vec::with_capacity(c * shots_per_class);
            for class_ids in classes.iter() {
                ids.extend_from_slice(
                    &class_ids[j * shots_per_class..(j + 1) * shots_per_class],
                );
            }
            let examples = ids
                .iter()
                .map(|&ix| {
                    let e = &benchmark.examples[ix];
                    LabeledExample { image: e.image.clone(), label: e.class }
                })
                .collect();
            let client_id = (domain * clients_per_domain + j) as u64;
            clients.push(ClientDataset::new(client_id, examples, Some(domain))?);
            example_ids.push(ids);
        }
    }
    Ok(Partition {
        clients,
        provenance: PartitionProvenance::Domain { clients_per_domain, shots_per_class },
        example_ids,
    })
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestReport {
    pub loaded: usize,
    pub skipped: Vec<String>,
}

/// Reads a `<domain>/<class>/*.png|ppm|jpg` tree into a grouped dataset.
/// Unreadable files are skipped and listed in the report; empty classes
/// are errors. Domain and class indices are assigned lexicographically.
pub fn ingest_folder(root: &Path, image_size: usize) -> Result<(GroupedDataset, IngestReport)> {
    let mut domains: Vec<String> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    domains.sort();
    if domains.is_empty() {
        return Err(Error::Config(format!("no domain directories under {}", root.display())));
    }
    // Union of class names across domains; duplicates share one id.
    let mut classes: Vec<String> = Vec::new();
    for d in &domains {
        for entry in std::fs::read_dir(root.join(d))? {
            let entry = entry?;
            if entry.path().is_dir() {
                let name = entry.file_name().to_string_lossy().into_owned();
                if !classes.contains(&name) {
                    classes.push(name);
                }
            }
        }
    }
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Config("no class directories found".into()));
    }

    let mut report = IngestReport::default();
    let mut examples = Vec::new();
    for (di, domain) in domains.iter().enumerate() {
        for (ci, class) in classes.iter().enumerate() {
            let dir = root.join(domain).join(class);
            if !dir.is_dir() {
                continue;
            }
            let mut files: Vec<_> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            let mut loaded_any = false;
            for path in files {
                match load_image(&path, image_size) {
                    Ok(image) => {
                        examples.push(GroupedExample { domain: di, class: ci, image });
                        report.loaded += 1;
                        loaded_any = true;
                    }
                    Err(e) => report.skipped.push(format!("{}: {e}", path.display())),
                }
            }
            if !loaded_any {
                return Err(Error::Config(format!(
                    "class {class:?} in domain {domain:?} has no readable images"
                )));
            }
        }
    }
    Ok((GroupedDataset { domain_names: domains, class_names: classes, examples }, report))
}

fn load_image(path: &Path, size: usize) -> Result<Image> {
    let img = image::open(path)?
        .resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle)
        .to_rgb8();
    let mut px = ndarray::Array3::zeros((size, size, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            px[[y as usize, x as usize, c]] = p.0[c] as f64 / 255.0;
        }
    }
    Image::new(px)
}

/// Writes images out as a `<domain>/<class>/` tree (synthetic-set export
/// and test fixtures share this).
pub fn export_image(image: &Image, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let (h, w) = (image.height(), image.width());
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            p.0[c] = (image.pixels()[[y as usize, x as usize, c]] * 255.0).round() as u8;
        }
    }
    buf.save(path)?;
    Ok(())
}
