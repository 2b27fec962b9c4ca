//! How often each prompt wins the routing argmax over a dataset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::rpn::route_embedded;
use crate::vlm::{Gateway, PromptSet};

/// One CSV row: the share of a dataset's rainy images routed to a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptShare {
    pub dataset: String,
    pub prompt_index: usize,
    pub percent: f64,
}

/// Per-prompt percentages over `images`; one row per prompt, summing to 100.
pub fn distribution_of(dataset: &str, images: &[Image], prompts: &PromptSet, gateway: &Gateway) -> Result<Vec<PromptShare>> {
    prompts.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let txt = gateway.encode_prompts(prompts)?;
    let mut wins = vec![0usize; prompts.len()];
    for img in images {
        wins[route_embedded(&gateway.encode_image(img)?, &txt, gateway)?.selected] += 1;
    }
    Ok(wins
        .iter()
        .enumerate()
        .map(|(i, &w)| PromptShare {
            dataset: dataset.to_string(),
            prompt_index: i,
            percent: 100.0 * w as f64 / images.len() as f64,
        })
        .collect())
}

/// Loads the rainy side of every manifest entry and tallies routes.
pub fn prompt_distribution(manifest: &DatasetManifest, prompts: &PromptSet, gateway: &Gateway) -> Result<Vec<PromptShare>> {
    let images = manifest
        .entries()
        .iter()
        .map(|e| Image::load(&e.rainy))
        .collect::<Result<Vec<_>>>()?;
    distribution_of(&manifest.name, &images, prompts, gateway)
}

/// `root` itself when it holds `rain/` and `norain/`, otherwise every
/// immediate subdirectory that does, sorted by name.
pub fn discover_datasets(root: impl AsRef<Path>) -> Result<Vec<DatasetManifest>> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    if root.join("rain").is_dir() {
        return Ok(vec![DatasetManifest::scan(root)?]);
    }
    let mut dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("rain").is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    dirs.iter().map(DatasetManifest::scan).collect()
}

pub fn to_csv(rows: &[PromptShare]) -> String {
    let mut out = String::from("dataset,prompt_index,percent\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.2}\n", r.dataset, r.prompt_index, r.percent));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_scene;
    use proptest::prelude::*;

    fn fixture() -> Vec<Image> {
        (0..10).map(|i| synthetic_scene(16, 16, 100 + i).unwrap()).collect()
    }

    fn brightness(v: f32) -> Image {
        Image::filled(4, 4, [v, v, v]).unwrap()
    }

    #[test]
    fn ten_image_fixture() {
        // Grey levels 0.0..0.9: the stub score gap is linear in the level, so
        // the darker images go to one prompt and the brighter to the other.
        let images: Vec<Image> = (0..10).map(|i| brightness(i as f32 / 10.0)).collect();
        let prompts = PromptSet::default_set();
        let gw = Gateway::stub();
        let routes: Vec<usize> = images
            .iter()
            .map(|img| crate::rpn::route(img, &prompts, &gw).unwrap().selected)
            .collect();
        assert!(routes.windows(2).all(|w| w[0] >= w[1]), "{routes:?}");
        let rows = distribution_of("fixture", &images, &prompts, &gw).unwrap();
        let pct: Vec<f64> = rows.iter().map(|r| r.percent).collect();
        assert_eq!(pct, vec![60.0, 40.0]);
        assert_eq!(to_csv(&rows), "dataset,prompt_index,percent\nfixture,0,60.00\nfixture,1,40.00\n");
    }

    #[test]
    fn rows_sum_to_one_hundred() {
        let prompts = PromptSet::builtin(1).unwrap();
        let images: Vec<Image> = (0..7).map(|i| brightness(i as f32 / 7.0)).collect();
        let rows = distribution_of("b", &images, &prompts, &Gateway::stub()).unwrap();
        assert_eq!(rows.len(), 3);
        assert!((rows.iter().map(|r| r.percent).sum::<f64>() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn single_prompt_and_empty_input_are_rejected() {
        let one = PromptSet {
            name: "one".into(),
            prompts: vec!["rain".into()],
        };
        assert!(distribution_of("x", &fixture(), &one, &Gateway::stub()).is_err());
        assert!(matches!(
            distribution_of("x", &[], &PromptSet::default_set(), &Gateway::stub()),
            Err(Error::EmptyDataset)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn permuting_prompts_permutes_percentages(rot in 1usize..3, seed in 0u64..1000) {
            let base = PromptSet::builtin(2).unwrap();
            let images: Vec<Image> = (0..6).map(|i| synthetic_scene(8, 8, seed + i).unwrap()).collect();
            let mut rotated = base.prompts.clone();
            rotated.rotate_left(rot);
            let permuted = PromptSet::new("rot", rotated).unwrap();
            let gw = Gateway::stub();
            let a = distribution_of("d", &images, &base, &gw).unwrap();
            let b = distribution_of("d", &images, &permuted, &gw).unwrap();
            for (i, row) in b.iter().enumerate() {
                prop_assert_eq!(row.percent, a[(i + rot) % 3].percent);
            }
        }
    }
}
