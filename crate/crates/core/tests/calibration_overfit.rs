//! Temporary overfit sanity check; removed before finalizing.
use regrid_core::gridnet::train::{train, TrainConfig};
use regrid_core::gridnet::{GridNet, NetConfig};
use regrid_core::losses::LossWeights;
use regrid_core::synth::{make_suite, SynthConfig};

#[test]
#[ignore]
fn overfit_one_pair() {
    let cfg = SynthConfig {
        dims: [16, 16, 16],
        grid_dims: [4, 4, 4],
        max_disp: 1.2,
        ..Default::default()
    };
    let one = make_suite(&cfg, 1, 300).unwrap();
    let pairs: Vec<_> = (0..8).map(|_| one[0].clone()).collect();
    for lr in [1e-3, 1e-2, 5e-2] {
        let mut net = GridNet::<f32>::new(NetConfig { bayesian: false, base_channels: 8, ..Default::default() }, 42).unwrap();
        let tc = TrainConfig {
            lr,
            epochs: 100, // 2 steps/epoch -> 200 steps
            batch_size: 4,
            grid_set: vec![[4, 4, 4]],
            weights: LossWeights { lambda2: 0.0, lambda3: 0.0, ..Default::default() },
            val_grid: [4, 4, 4],
            seed: 5,
            ..Default::default()
        };
        let stats = train(&mut net, &pairs, &one, &tc).unwrap();
        let f = net.forward(&one[0].fixed, &one[0].moving, [4, 4, 4]).unwrap();
        let sup = f.mu.comps.iter().flatten().fold(0.0f64, |m, &v| m.max(v.abs()));
        println!(
            "lr={lr}: init={:.3e} final={:.3e} ratio={:.3} sup|mu|={:.3}",
            stats.val_losses[0],
            stats.val_losses.last().unwrap(),
            stats.val_losses.last().unwrap() / stats.val_losses[0],
            sup
        );
    }
}
