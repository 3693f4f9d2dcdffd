#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use refertok::geometry::{BinaryMask, ImageBuffer};
use refertok::io::png::{write_image, write_mask};

pub const W: usize = 96;
pub const H: usize = 72;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_refertok"))
}

pub fn run(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn refertok")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}: {}",
        o.status.code(),
        stderr(o)
    );
}

pub fn scene_image() -> ImageBuffer {
    ImageBuffer::from_fn(W, H, 3, |x, y, c| {
        let v = ((x * (c + 1) + 3 * y) % 37) as f64 / 37.0;
        if (20..50).contains(&x) && (10..40).contains(&y) {
            1.0 - v * 0.3
        } else {
            v
        }
    })
    .unwrap()
}

pub fn rect(x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
    BinaryMask::from_fn(W, H, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y)).unwrap()
}

pub fn disc(cx: f64, cy: f64, r: f64) -> BinaryMask {
    BinaryMask::from_fn(W, H, |x, y| {
        (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r
    })
    .unwrap()
}

/// Writes `scene.png`, two still objects and one 3-frame object; returns the spec paths.
pub struct Scene {
    pub image: PathBuf,
    pub still: PathBuf,
    pub video: PathBuf,
}

pub fn write_scene(dir: &Path) -> Scene {
    let image = dir.join("scene.png");
    write_image(&image, &scene_image()).unwrap();
    write_mask(dir.join("box.png"), &rect(20, 10, 50, 40)).unwrap();
    write_mask(dir.join("ball.png"), &disc(70.0, 50.0, 9.0)).unwrap();
    for (i, dx) in [0.0, 4.0, 8.0].iter().enumerate() {
        write_mask(dir.join(format!("mov{i}.png")), &disc(30.0 + dx, 55.0, 7.0)).unwrap();
    }
    let still = dir.join("still.json");
    std::fs::write(
        &still,
        r#"[{"object_id": "box", "mask": "box.png"}, {"object_id": "ball", "mask": "ball.png"}]"#,
    )
    .unwrap();
    let video = dir.join("video.json");
    std::fs::write(
        &video,
        r#"[{"object_id": "box", "frames": [
              {"timestamp": 0.0, "mask": "box.png"},
              {"timestamp": 0.5, "mask": "box.png"},
              {"timestamp": 1.0, "mask": "box.png"}]},
            {"object_id": "mov", "frames": [
              {"timestamp": 0.0, "mask": "mov0.png"},
              {"timestamp": 0.5, "mask": "mov1.png"},
              {"timestamp": 1.0, "mask": "mov2.png"}]}]"#,
    )
    .unwrap();
    Scene {
        image,
        still,
        video,
    }
}

/// Small model so the debug-build pipeline stays fast.
pub const SMALL_CONFIG: &str = r#"{
    "encoder": {"patch_h": 8, "patch_w": 8, "embed_dim": 16},
    "tokenizer": {"n": 8, "hidden_dim": 32, "out_dim": 16},
    "attention": {"heads": 4},
    "infusion": {"local_grid": [6, 6], "global_grid": [8, 8]}
}"#;

pub fn write_small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.json");
    std::fs::write(&p, SMALL_CONFIG).unwrap();
    p
}

pub fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}
