//! Image-folder ingestion on hand-made fixtures.

use std::fs;
use std::path::Path;

use domaug_core::data::{export_image_folder, generate_synthetic, load_image_folder, GlyphConfig};
use image::{GrayImage, Luma, Rgb, RgbImage};

fn write_gray(path: &Path, w: u32, h: u32, value: impl Fn(u32, u32) -> u8) {
    GrayImage::from_fn(w, h, |x, y| Luma([value(x, y)]))
        .save(path)
        .unwrap();
}

#[test]
fn two_classes_of_three_files() {
    let root = tempfile::tempdir().unwrap();
    for class in ["cat", "dog"] {
        fs::create_dir(root.path().join(class)).unwrap();
        for i in 0..3 {
            let level = if class == "cat" { 0 } else { 255 };
            write_gray(
                &root.path().join(class).join(format!("{i}.png")),
                8,
                8,
                |_, _| level,
            );
        }
    }
    // stray non-image files are ignored
    fs::write(root.path().join("cat").join("notes.txt"), "hello").unwrap();

    let d = load_image_folder(root.path(), 1, 8).unwrap();
    assert_eq!(d.len(), 6);
    assert_eq!(d.labels(), &[0, 0, 0, 1, 1, 1]);
    assert_eq!(d.class_names(), &["cat".to_string(), "dog".to_string()]);
    assert_eq!(d.image_shape(), [1, 8, 8]);
    // a black image decodes to exactly zero, a white one to exactly one
    assert!(d.image(0).data().iter().all(|&v| v == 0.0));
    assert!(d.image(5).data().iter().all(|&v| v == 1.0));
}

#[test]
fn rgb_channels_are_planar() {
    let root = tempfile::tempdir().unwrap();
    fs::create_dir(root.path().join("a")).unwrap();
    RgbImage::from_fn(4, 4, |_, _| Rgb([255, 0, 51]))
        .save(root.path().join("a").join("x.png"))
        .unwrap();
    let d = load_image_folder(root.path(), 3, 4).unwrap();
    let img = d.image(0);
    assert!(img.data()[..16].iter().all(|&v| v == 1.0));
    assert!(img.data()[16..32].iter().all(|&v| v == 0.0));
    assert!(img.data()[32..].iter().all(|&v| (v - 0.2).abs() < 1e-12));
}

#[test]
fn non_square_images_are_center_cropped() {
    let root = tempfile::tempdir().unwrap();
    fs::create_dir(root.path().join("a")).unwrap();
    // 12 wide, 4 tall: the middle 4 columns are white, the rest black
    write_gray(&root.path().join("a").join("x.pgm"), 12, 4, |x, _| {
        if (4..8).contains(&x) {
            255
        } else {
            0
        }
    });
    let d = load_image_folder(root.path(), 1, 4).unwrap();
    assert!(d.image(0).data().iter().all(|&v| v == 1.0));
}

#[test]
fn exported_synthetic_data_reloads_within_quantization() {
    let cfg = GlyphConfig {
        num_base_shapes: 2,
        samples_per_class: 3,
        image_size: 16,
        ..GlyphConfig::default()
    };
    let d = generate_synthetic(&cfg).unwrap();
    let root = tempfile::tempdir().unwrap();
    export_image_folder(&d, root.path(), serde_json::json!({"kind": "test"})).unwrap();
    let back = load_image_folder(root.path(), 1, 16).unwrap();
    assert_eq!(back.len(), d.len());
    assert_eq!(back.class_names(), d.class_names());
    assert_eq!(back.labels(), d.labels());
    for (a, b) in back.images().data().iter().zip(d.images().data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }
}
