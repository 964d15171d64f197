//! Tensor container, images and JSON on disk.

use camreframe::io::{decode_pnm, encode_tensor, mask_tensor, read_json, read_tensor, write_json, write_mask_pgm, write_tensor, IoError, Tensor};
use camreframe::io::decode_tensor;
use camreframe::synthscene::{synthesize, SceneSpec};
use camreframe::video::OcclusionMask;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("camreframe_io");
    std::fs::create_dir_all(&dir)?;

    let t = Tensor::f32(vec![2, 3], vec![0.0, 1.5, -2.25, 1024.0, 0.1, -3e-5])?;
    let path = dir.join("small.lrtf");
    write_tensor(&path, &t)?;
    let back = read_tensor(&path)?;
    println!("dims {:?}, values {:?}", back.dims(), back.as_f32()?);

    let mut bytes = encode_tensor(&t);
    let last = bytes.len() - 5;
    bytes[last] ^= 0x10;
    match decode_tensor(&bytes) {
        Err(IoError::BadCrc { stored, computed }) => println!("corruption caught: stored {stored:#010x}, computed {computed:#010x}"),
        other => println!("unexpected: {other:?}"),
    }

    let mask = OcclusionMask::filled(1, 4, 6, true);
    write_tensor(&dir.join("mask.lrtf"), &mask_tensor(&mask))?;
    write_mask_pgm(&dir, "mask", &mask)?;
    let (channels, w, h, _) = decode_pnm(&std::fs::read(dir.join("mask_000.pgm"))?)?;
    println!("mask image {w}x{h}, {channels} channel");

    let spec = SceneSpec::default();
    let (_, bundle) = synthesize(&spec)?;
    write_json(&dir.join("poses.json"), &bundle.source_poses)?;
    let poses: camreframe::trajectory::Trajectory = read_json(&dir.join("poses.json"))?;
    println!("{} poses survived JSON", poses.len());
    Ok(())
}
