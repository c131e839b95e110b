#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lesionkit::grid::Grid;
use lesionkit::ingest::encode_hu;
use lesionkit::synthetic::DiskPhantom;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn lesionkit(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lesionkit"))
        .args(args)
        .env("LESIONKIT_OUT_DIR", out_dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// The two phantoms referenced by `annotations.csv`.
pub fn fixture_phantoms() -> [(DiskPhantom, u64, &'static str); 2] {
    [
        (DiskPhantom::default(), 1, "000001_01_01/010.png"),
        (DiskPhantom { center: (50.0, 70.0), radius: 16.0, ..DiskPhantom::default() }, 2, "000002_01_01_020.png"),
    ]
}

pub fn write_png16(path: &Path, hu: &Grid<f64>) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    let (w, h) = hu.dims();
    let raw: Vec<u16> = hu.as_slice().iter().map(|&v| encode_hu(v.round() as i32)).collect();
    image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w as u32, h as u32, raw)
        .unwrap()
        .save(path)
        .unwrap();
}

/// Writes the phantom slices under `root`, one nested and one flat.
pub fn write_fixture_images(root: &Path) {
    for (phantom, seed, rel) in fixture_phantoms() {
        write_png16(&root.join(rel), &phantom.sample(seed).image);
    }
}

pub fn read_mask(path: &Path) -> Grid<bool> {
    let img = image::open(path).unwrap().into_luma8();
    let (w, h) = img.dimensions();
    Grid::from_vec(w as usize, h as usize, img.into_raw().into_iter().map(|v| v > 127).collect())
}

pub fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}
