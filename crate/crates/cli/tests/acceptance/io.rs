use std::fs;
use std::path::Path;
use std::process::Command;

use generalist_core::eval::per_class_report;
use generalist_core::{checkpoint, load_idx, write_idx, Array, AttackSpec, Dataset, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::{ensure, workspace};
use crate::Outcome;

fn idx_round_trip(dir: &Path) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1d);
    let mut samples = 0;
    for (n, rows, cols, classes) in [(1, 1, 1, 2), (7, 5, 3, 10), (64, 28, 28, 10)] {
        let pixels: Vec<f64> = (0..n * rows * cols)
            .map(|_| rng.random_range(0..=255u8) as f64 / 255.0)
            .collect();
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        labels[0] = classes - 1;
        let data = Dataset::new(Array::new(vec![n, 1, rows, cols], pixels).unwrap(), labels, classes).unwrap();
        let (img, lab) = (dir.join(format!("img-{n}")), dir.join(format!("lab-{n}")));
        write_idx(&data, &img, &lab).map_err(|e| e.to_string())?;
        let back = load_idx(&img, &lab).map_err(|e| e.to_string())?;
        ensure(back == data, || {
            format!("{n}x{rows}x{cols} fixture changed on round trip")
        })?;
        samples += n;
    }

    // Hand-assembled file: two 2x2 images and their labels.
    let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
    images.extend([0, 255, 51, 102, 255, 0, 0, 0]);
    let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 1, 0];
    fs::write(dir.join("hand-img"), &images).unwrap();
    fs::write(dir.join("hand-lab"), &labels).unwrap();
    let d = load_idx(&dir.join("hand-img"), &dir.join("hand-lab")).map_err(|e| e.to_string())?;
    ensure(d.sample_shape() == [1, 2, 2] && d.labels() == [1, 0], || {
        "hand fixture header misread".into()
    })?;
    ensure(d.inputs().data()[..4] == [0.0, 1.0, 0.2, 0.4], || {
        "hand fixture pixels misread".into()
    })?;
    write_idx(&d, &dir.join("hand-img2"), &dir.join("hand-lab2")).map_err(|e| e.to_string())?;
    ensure(fs::read(dir.join("hand-img2")).unwrap() == images, || {
        "hand fixture images not rewritten verbatim".into()
    })?;
    ensure(fs::read(dir.join("hand-lab2")).unwrap() == labels, || {
        "hand fixture labels not rewritten verbatim".into()
    })?;
    Ok(samples + 2)
}

fn train_cli(args: &[&str], out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_generalist"))
        .current_dir(workspace())
        .arg("train")
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || {
        format!("train failed: {}", String::from_utf8_lossy(&status.stderr))
    })
}

fn checkpoint_reload(dir: &Path) -> Result<f64, String> {
    // Reuses the run from the manifest check.
    let run = dir.join("run-a");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).map_err(|e| e.to_string())?;
    let model = checkpoint::load(&run.join("checkpoint.bin")).map_err(|e| e.to_string())?;
    let config = generalist_core::RunConfig::load(&run.join("resolved_config.toml"), &[]).map_err(|e| e.to_string())?;
    let (_, test) = config.data.load().map_err(|e| e.to_string())?;
    let mut net = Network::new(&model.spec).map_err(|e| e.to_string())?;
    let attack: AttackSpec = config.eval_attack();
    let report = per_class_report(
        &mut net,
        model.params.as_slice(),
        &test,
        Some((&attack, config.eval.seed)),
    )
    .map_err(|e| e.to_string())?;
    let recorded = &summary["final_eval"];
    let clean = recorded["clean_acc"].as_f64().unwrap();
    let robust = recorded["robust"]["accuracy"].as_f64().unwrap();
    ensure(report.clean_acc.to_bits() == clean.to_bits(), || {
        format!("clean accuracy {} != recorded {clean}", report.clean_acc)
    })?;
    ensure(report.robust_acc().unwrap().to_bits() == robust.to_bits(), || {
        format!("robust accuracy {:?} != recorded {robust}", report.robust_acc())
    })?;
    Ok(report.clean_acc)
}

fn manifest_rerun(dir: &Path) -> Result<usize, String> {
    let (a, b) = (dir.join("run-a"), dir.join("run-b"));
    train_cli(&["--config", "configs/blobs.toml", "--set", "train.epochs=4"], &a)?;
    let manifest = a.join("manifest.json");
    train_cli(&["--manifest", manifest.to_str().unwrap()], &b)?;
    let listed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    let files: Vec<&str> = listed["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f.as_str().unwrap())
        .collect();
    let mut on_disk: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    on_disk.sort();
    let mut sorted = files.clone();
    sorted.sort();
    ensure(on_disk == sorted, || {
        format!("manifest lists {sorted:?}, directory has {on_disk:?}")
    })?;
    let mut compared = 0;
    for f in &files {
        if *f == "manifest.json" {
            continue;
        }
        ensure(fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap(), || {
            format!("{f} differs on re-run")
        })?;
        compared += 1;
    }
    // Manifests differ only in their timings.
    let strip = |p: &Path| {
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("timings");
        v
    };
    ensure(strip(&manifest) == strip(&b.join("manifest.json")), || {
        "manifests differ beyond timings".into()
    })?;
    Ok(compared)
}

pub fn criterion() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let samples = idx_round_trip(tmp.path())?;
    let files = manifest_rerun(tmp.path())?;
    let acc = checkpoint_reload(tmp.path())?;
    Ok(format!(
        "IDX identity on {samples} samples; reloaded checkpoint reproduces accuracy {acc} bitwise; {files} artifacts byte-identical on re-run"
    ))
}
