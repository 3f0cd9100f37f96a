//! Synthetic two-cluster knowledge base and a matching downstream table.
//!
//! Both clusters draw string tails from the same vocabularies, with
//! cluster-dependent frequencies; numeric and date tails shift by cluster.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use tartekit::ingest::Table;

pub const COLORS: [&str; 8] = ["red", "blue", "green", "yellow", "purple", "orange", "black", "white"];
pub const MATERIALS: [&str; 8] = ["wood", "stone", "steel", "glass", "brick", "clay", "iron", "marble"];
pub const REGIONS: [&str; 8] = ["north", "south", "east", "west", "coast", "valley", "mountain", "plain"];

pub struct Entity {
    pub name: String,
    pub cluster: usize,
    pub color: Vec<String>,
    pub material: String,
    pub region: String,
    pub height: f64,
    pub rating: f64,
    pub founded: String,
}

fn pick<'a>(vocab: &[&'a str], cluster: usize, rng: &mut ChaCha8Rng) -> &'a str {
    // 80% of the mass on the cluster's half of the vocabulary
    let half = vocab.len() / 2;
    let own = rng.random::<f64>() < 0.8;
    let start = if own == (cluster == 0) { 0 } else { half };
    vocab[start + rng.random_range(0..half)]
}

pub fn entities(n: usize, rng: &mut ChaCha8Rng) -> Vec<Entity> {
    let noise = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|i| {
            let c = i % 2;
            let n_colors = if rng.random::<f64>() < 0.3 { 2 } else { 1 };
            let year = if c == 0 { rng.random_range(1900..1960) } else { rng.random_range(1940..2000) };
            Entity {
                name: format!("entity{i:03}"),
                cluster: c,
                color: (0..n_colors).map(|_| pick(&COLORS, c, rng).to_string()).collect(),
                material: pick(&MATERIALS, c, rng).to_string(),
                region: pick(&REGIONS, c, rng).to_string(),
                height: (3.0 + c as f64 + 0.5 * noise.sample(rng)).exp(),
                rating: 2.0 + 1.5 * c as f64 + noise.sample(rng),
                founded: format!("{year}-{:02}-{:02}", rng.random_range(1..13), rng.random_range(1..29)),
            }
        })
        .collect()
}

/// Triple-file text for the entities.
pub fn kb_text(ents: &[Entity]) -> String {
    let mut s = String::from("# synthetic two-cluster knowledge base\n");
    for e in ents {
        for c in &e.color {
            s.push_str(&format!("{}\tcolor\t{c}\tstr\n", e.name));
        }
        s.push_str(&format!("{}\tmaterial\t{}\tstr\n", e.name, e.material));
        s.push_str(&format!("{}\tregion\t{}\tstr\n", e.name, e.region));
        s.push_str(&format!("{}\theight\t{:.4}\tnum\n", e.name, e.height));
        s.push_str(&format!("{}\trating\t{:.4}\tnum\n", e.name, e.rating));
        s.push_str(&format!("{}\tfounded\t{}\tdt\n", e.name, e.founded));
    }
    s
}

/// Downstream table over the same entities with target
/// `2·cluster + N(0, noise²)`.
pub fn table(ents: &[Entity], noise: f64, rng: &mut ChaCha8Rng) -> Table {
    let n01 = Normal::new(0.0, 1.0).unwrap();
    let headers = ["color", "material", "region", "height", "rating", "founded", "target"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = ents
        .iter()
        .map(|e| {
            vec![
                e.color[0].clone(),
                e.material.clone(),
                e.region.clone(),
                format!("{:.4}", e.height),
                format!("{:.4}", e.rating),
                e.founded.clone(),
                format!("{:.6}", 2.0 * e.cluster as f64 + noise * n01.sample(rng)),
            ]
        })
        .collect();
    Table::new(headers, rows).unwrap()
}
