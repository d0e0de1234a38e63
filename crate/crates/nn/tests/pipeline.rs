use std::fs;
use std::path::Path;

use steerbo_nn::container::{network_from_container, network_to_container, Container};
use steerbo_nn::data::{
    load_frames, load_split, preprocess, save_split, split_dataset, stack_frames, synth_dataset, write_pnm, Image,
    SynthSpec,
};
use steerbo_nn::model::{build_pilotnet, Network, PilotNetConfig};

fn write_fixture(dir: &Path, n: usize, w: usize, h: usize) -> Vec<f64> {
    let mut labels = String::new();
    let mut angles = Vec::new();
    for i in 0..n {
        let name = format!("{i:03}.pgm");
        let pixels: Vec<u8> = (0..w * h).map(|p| ((p + 7 * i) % 256) as u8).collect();
        write_pnm(&dir.join(&name), w, h, 1, &pixels).unwrap();
        let angle = -4.5 + i as f64 * 1.25;
        labels.push_str(&format!("{name} {angle}\n"));
        angles.push(angle);
    }
    fs::write(dir.join("data.txt"), labels).unwrap();
    angles
}

#[test]
fn fixture_loads_in_file_order() {
    let dir = tempfile::tempdir().unwrap();
    let angles = write_fixture(dir.path(), 10, 12, 9);
    let frames = load_frames(dir.path(), &dir.path().join("data.txt")).unwrap();
    assert_eq!(frames.len(), 10);
    assert_eq!(frames.iter().map(|f| f.angle).collect::<Vec<_>>(), angles);
    assert!(frames.iter().enumerate().all(|(i, f)| f.index == i && f.pixels.len() == 12 * 9));
}

#[test]
fn missing_image_and_size_mismatch_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 3, 6, 5);
    fs::remove_file(dir.path().join("001.pgm")).unwrap();
    let err = load_frames(dir.path(), &dir.path().join("data.txt")).unwrap_err();
    assert!(err.to_string().contains("001.pgm"));

    write_pnm(&dir.path().join("001.pgm"), 7, 5, 1, &[0; 35]).unwrap();
    assert!(load_frames(dir.path(), &dir.path().join("data.txt")).is_err());
}

#[test]
fn color_frames_go_through_the_full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (w, h) = (455, 256);
    let mut labels = String::new();
    for i in 0..4 {
        let pixels: Vec<u8> = (0..w * h * 3).map(|p| ((p / 3 + i) % 251) as u8).collect();
        write_pnm(&dir.path().join(format!("{i}.ppm")), w, h, 3, &pixels).unwrap();
        labels.push_str(&format!("{i}.ppm {}\n", i as f64 * 0.5));
    }
    fs::write(dir.path().join("labels.txt"), labels).unwrap();
    let frames = load_frames(dir.path(), &dir.path().join("labels.txt")).unwrap();
    let images: Vec<(Image, f64)> = frames.iter().map(|f| (preprocess(f, 80, 26).unwrap(), f.angle)).collect();
    let samples = stack_frames(&images).unwrap();
    assert_eq!(samples.len(), 2);
    assert_eq!(samples[0].frames.shape(), &[3, 66, 200, 3]);
    assert_eq!(samples.iter().map(|s| s.label).collect::<Vec<_>>(), vec![1.0, 1.5]);
}

#[test]
fn dataset_cache_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let split = split_dataset(synth_dataset(30, &SynthSpec::default(), 4).unwrap(), (0.64, 0.16, 0.20)).unwrap();
    let path = dir.path().join("cache.bin");
    save_split(&split, &path).unwrap();
    assert_eq!(load_split(&path).unwrap(), split);
}

#[test]
fn weights_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let desc = build_pilotnet(&PilotNetConfig::default(), [3, 66, 200, 1]).unwrap();
    let net = Network::from_descriptor(&desc, 8).unwrap();
    let path = dir.path().join("w.bin");
    network_to_container(&net).save(&path).unwrap();
    let back = network_from_container(&Container::load(&path).unwrap(), Some(&desc)).unwrap();
    assert_eq!(back.weights_digest(), net.weights_digest());
}
