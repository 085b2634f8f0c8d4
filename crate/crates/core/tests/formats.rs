use std::fs;

use physmamba_core::synth::{generate_dataset, read_clip, read_dataset, write_dataset};
use physmamba_core::train::fresh_checkpoint;
use physmamba_core::{Checkpoint, Error, ModelConfig, SynthConfig, TrainConfig};

fn three_clips() -> Vec<physmamba_core::ClipRecord> {
    generate_dataset(&SynthConfig { clips: 3, height: 20, width: 16, duration_s: 2.0, ..SynthConfig::default() }).unwrap()
}

fn tree_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_round_trip_is_exact_at_stored_precision() {
    let recs = three_clips();
    let a = tempfile::tempdir().unwrap();
    write_dataset(a.path(), &recs).unwrap();
    let back = read_dataset(a.path()).unwrap();
    assert_eq!(back.len(), 3);
    for (orig, read) in recs.iter().zip(&back) {
        let want = orig.rounded();
        assert_eq!(want.meta, read.meta);
        assert_eq!(want.label, read.label);
        assert!(want.frames == read.frames, "frames differ for {}", read.meta.id);
    }
    let b = tempfile::tempdir().unwrap();
    write_dataset(b.path(), &back).unwrap();
    assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
}

#[test]
fn truncated_frames_are_a_format_error() {
    let recs = three_clips();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &recs).unwrap();
    let clip = dir.path().join(&recs[0].meta.id);
    let frames = clip.join("frames.f32");
    let bytes = fs::read(&frames).unwrap();
    fs::write(&frames, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(read_clip(&clip), Err(Error::Format { .. })));
}

#[test]
fn flipped_byte_fails_the_checksum() {
    let recs = three_clips();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &recs).unwrap();
    let label = dir.path().join(&recs[1].meta.id).join("label.f32");
    let mut bytes = fs::read(&label).unwrap();
    bytes[0] ^= 1;
    fs::write(&label, bytes).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");
}

#[test]
fn missing_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = read_dataset(&dir.path().join("absent")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("absent"), "{err}");
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let model = ModelConfig { channels: 8, blocks: 1, d_state: 4, ca_ratio: 2, head_width: 4, frames: 8, height: 8, width: 8, ..ModelConfig::default() };
    let mut ck = fresh_checkpoint(&model, &TrainConfig::default()).unwrap();
    ck.params.round_to_f32();
    ck.adam.round_to_f32();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);

    let other = ModelConfig { channels: 16, ..model };
    assert!(matches!(ck.check_model(&other), Err(Error::Config(_))));

    for entry in fs::read_dir(&path).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "f32") {
            let bytes = fs::read(&p).unwrap();
            fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
            break;
        }
    }
    assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
}
