//! Overfits FCVSR-S (c=16) to one synthetic 7-frame clip and prints the
//! whole-clip PSNR as training proceeds.
//!
//! `cargo run --release --example overfit -- [steps] [lr0] [eval_every] [alpha]`

use std::time::Instant;

use fcvsr::config::{ModelConfig, RunConfig};
use fcvsr::data::Sequence;
use fcvsr::image_io::bicubic_downsample;
use fcvsr::train::{evaluate, Trainer, Variant};
use fcvsr::Tensor;

fn clip() -> Sequence {
    let hr: Vec<Tensor<f32>> = (0..7)
        .map(|t| {
            Tensor::from_fn(&[3, 128, 128], |i| {
                let (c, y, x) = (i / (128 * 128), (i / 128) % 128, i % 128);
                let (x, y) = (x as f32 + 1.5 * t as f32, y as f32 + 0.75 * t as f32);
                let c = c as f32;
                0.5 + 0.2 * (0.11 * x + 0.7 * c).sin() * (0.07 * y).cos()
                    + 0.15 * (0.23 * (x + y) + c).sin()
                    + 0.1 * (0.31 * x - 0.17 * y).cos()
            })
        })
        .collect();
    let lr = hr.iter().map(|f| bicubic_downsample(f, 4).unwrap()).collect();
    Sequence::new("synthetic".into(), lr, hr, 4).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).map_or(2000, |v| v.parse().unwrap());
    let lr0: f64 = args.get(2).map_or(2e-4, |v| v.parse().unwrap());
    let every: u64 = args.get(3).map_or(50, |v| v.parse().unwrap());
    let alpha: f64 = args.get(4).map_or(1.0, |v| v.parse().unwrap());
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::fcvsr_s().with_channels(16);
    cfg.train.batch = 1;
    cfg.train.patch = 0;
    cfg.train.augment = false;
    cfg.train.lr0 = lr0;
    cfg.loss.alpha = alpha;
    cfg.train.total_epochs = steps;
    cfg.train.milestones = vec![steps / 2, steps * 3 / 4, steps * 7 / 8];
    let seq = clip();
    let mut tr = Trainer::new(cfg, &Variant::Baseline, vec![seq.clone()]).unwrap();
    let mut zero = tr.params.clone();
    let tail = (0..zero.len()).filter(|&i| zero.names()[i].starts_with("rec.tail")).collect::<Vec<_>>();
    for i in tail {
        zero.value_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let base = evaluate(&tr.model, &zero, &[seq], None).unwrap();
    println!("bilinear baseline {:.2} dB, init {:.2} dB", base.mean_psnr, tr.training_psnr().unwrap());
    let t0 = Instant::now();
    while tr.step < steps {
        let row = tr.train_step(None).unwrap();
        if tr.step % every == 0 {
            println!(
                "step {:5} loss {:.5} batch {:.2} clip {:.2} dB  {:.0}s",
                tr.step,
                row.l_all,
                row.psnr,
                tr.training_psnr().unwrap(),
                t0.elapsed().as_secs_f64()
            );
        }
    }
}
