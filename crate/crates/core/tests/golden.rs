//! Frozen toy-encoder outputs. Run with `SAP_BLESS=1` to rewrite the files
//! after an intentional change to the toy backbone.

use std::path::PathBuf;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use sap_core::{build_toy_encoder, encode_image, encode_text, EncoderConfig, Image};

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct TextGolden {
    text: String,
    feature: Vec<f64>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct ImageGolden {
    seed: u64,
    global_feature: Vec<f64>,
    local_features: Vec<Vec<f64>>,
}

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden").join(name)
}

fn check<T: Serialize + for<'de> Deserialize<'de> + PartialEq + std::fmt::Debug>(name: &str, value: &T) {
    let path = golden_path(name);
    if std::env::var_os("SAP_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(value).unwrap() + "\n").unwrap();
        return;
    }
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("missing golden file {} ({e}); run with SAP_BLESS=1", path.display()));
    let expected: T = serde_json::from_str(&text).unwrap();
    assert_eq!(&expected, value, "toy encoder output drifted from {}", path.display());
}

#[test]
fn text_feature_of_a_cat_photo() {
    let bundle = build_toy_encoder(&EncoderConfig::default()).unwrap();
    let text = "a photo of a cat";
    let features = encode_text(&[text], &bundle, None).unwrap();
    check(
        "text_a_photo_of_a_cat.json",
        &TextGolden {
            text: text.into(),
            feature: features.row(0).to_vec(),
        },
    );
}

#[test]
fn image_features_four_patches() {
    let config = EncoderConfig {
        patches: 4,
        ..EncoderConfig::default()
    };
    let bundle = build_toy_encoder(&config).unwrap();
    let seed = 11;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = Array2::from_shape_simple_fn((4, bundle.backbone().patch_dim()), || rng.random_range(-1.0..1.0));
    let features = encode_image(&Image(pixels), &bundle, None).unwrap();
    check(
        "image_four_patches.json",
        &ImageGolden {
            seed,
            global_feature: features.global_feature.to_vec(),
            local_features: features.local_features.rows().into_iter().map(|r| r.to_vec()).collect(),
        },
    );
}
