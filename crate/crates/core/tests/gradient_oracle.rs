//! Analytic gradients of every layer kernel against central finite differences
//! in 64-bit arithmetic.

use ienet_core::bn::BnSlot;
use ienet_core::gradcheck::finite_diff_gradcheck;
use ienet_core::ops::{self, ConvGradsMut, ConvWeights};
use ienet_core::{ArchSpec, LayerSpec, Mode, SharedNetwork, SubNetworkPlan, Tensor};
use ienet_core::plan::{ChannelSelection, RecombinationKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with(t: &Tensor<f64>, values: &[f64]) -> Tensor<f64> {
    Tensor::new(t.shape().to_vec(), values.to_vec()).unwrap()
}

#[test]
fn conv2d_partial_selection_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (stride, pad, bias) in [(1, 1, true), (2, 1, false), (1, 0, true)] {
        let in_sel = [4, 0, 2];
        let out_sel = [5, 1, 3, 0];
        let x = random(&[2, 3, 5, 5], &mut rng);
        let kernel = random(&[6, 5, 3, 3], &mut rng);
        let b = random(&[6], &mut rng);
        let bias_ref = bias.then_some(&b);
        let y = ops::conv2d(&x, ConvWeights { kernel: &kernel, bias: bias_ref }, &in_sel, &out_sel, stride, pad).unwrap();
        let r = random(y.shape(), &mut rng);

        let mut gk = Tensor::zeros(kernel.shape());
        let mut gb = Tensor::zeros(&[6]);
        let gx = ops::conv2d_backward(
            &x,
            ConvWeights { kernel: &kernel, bias: bias_ref },
            &in_sel,
            &out_sel,
            stride,
            pad,
            &r,
            ConvGradsMut { kernel: &mut gk, bias: bias.then_some(&mut gb) },
        )
        .unwrap();

        let loss = |x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>| {
            let w = ConvWeights { kernel: k, bias: bias.then_some(b) };
            Ok(dot(&ops::conv2d(x, w, &in_sel, &out_sel, stride, pad)?, &r))
        };
        let ex = finite_diff_gradcheck(|v| loss(&with(&x, v), &kernel, &b), x.data(), gx.data(), EPS).unwrap();
        let ek = finite_diff_gradcheck(|v| loss(&x, &with(&kernel, v), &b), kernel.data(), gk.data(), EPS).unwrap();
        assert!(ex < TOL && ek < TOL, "stride {stride}: input {ex:e}, kernel {ek:e}");
        if bias {
            let eb = finite_diff_gradcheck(|v| loss(&x, &kernel, &with(&b, v)), b.data(), gb.data(), EPS).unwrap();
            assert!(eb < TOL, "bias {eb:e}");
        }

        // unselected kernel rows and columns stay exactly zero
        for o in 0..6 {
            for i in 0..5 {
                let touched = out_sel.contains(&o) && in_sel.contains(&i);
                let block = &gk.data()[(o * 5 + i) * 9..][..9];
                if !touched {
                    assert!(block.iter().all(|&g| g == 0.0));
                }
            }
        }
    }
}

#[test]
fn full_selection_matches_unrestricted_convolution_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&[2, 4, 6, 6], &mut rng);
    let kernel = random(&[5, 4, 3, 3], &mut rng);
    let b = random(&[5], &mut rng);
    let w = ConvWeights { kernel: &kernel, bias: Some(&b) };
    let sel = ops::conv2d(&x, w, &[0, 1, 2, 3], &[0, 1, 2, 3, 4], 1, 1).unwrap();
    let full = ops::conv2d_unrestricted(&x, w, 1, 1).unwrap();
    assert!(sel.data().iter().zip(full.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn dense_partial_selection_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let in_sel = [5, 2, 0, 3];
    let x = random(&[3, 4], &mut rng);
    let w = random(&[3, 6], &mut rng);
    let b = random(&[3], &mut rng);
    let r = random(&[3, 3], &mut rng);
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(b.shape());
    let gx = ops::dense_backward(&x, &w, &b, &in_sel, &r, &mut gw, &mut gb).unwrap();
    let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| Ok(dot(&ops::dense(x, w, b, &in_sel)?, &r));
    let ex = finite_diff_gradcheck(|v| loss(&with(&x, v), &w, &b), x.data(), gx.data(), EPS).unwrap();
    let ew = finite_diff_gradcheck(|v| loss(&x, &with(&w, v), &b), w.data(), gw.data(), EPS).unwrap();
    let eb = finite_diff_gradcheck(|v| loss(&x, &w, &with(&b, v)), b.data(), gb.data(), EPS).unwrap();
    assert!(ex < TOL && ew < TOL && eb < TOL, "{ex:e} {ew:e} {eb:e}");
    for row in gw.data().chunks(6) {
        assert_eq!((row[1], row[4]), (0.0, 0.0));
    }
}

#[test]
fn batchnorm_train_mode_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random(&[4, 3, 2, 2], &mut rng);
    let mut slot = BnSlot::new(3);
    slot.scale.value = random(&[3], &mut rng);
    slot.shift.value = random(&[3], &mut rng);
    let template = slot.clone();
    let (y, cache) = slot.forward_train(&x).unwrap();
    let r = random(y.shape(), &mut rng);
    let gx = slot.backward(&cache, &r).unwrap();

    let loss = |x: &Tensor<f64>, scale: &Tensor<f64>, shift: &Tensor<f64>| {
        let mut s = template.clone();
        s.scale.value = scale.clone();
        s.shift.value = shift.clone();
        Ok(dot(&s.forward_train(x)?.0, &r))
    };
    let (sc, sh) = (&template.scale.value, &template.shift.value);
    let ex = finite_diff_gradcheck(|v| loss(&with(&x, v), sc, sh), x.data(), gx.data(), EPS).unwrap();
    let eg = finite_diff_gradcheck(|v| loss(&x, &with(sc, v), sh), sc.data(), slot.scale.grad.data(), EPS).unwrap();
    let eb = finite_diff_gradcheck(|v| loss(&x, sc, &with(sh, v)), sh.data(), slot.shift.grad.data(), EPS).unwrap();
    assert!(ex < TOL && eg < TOL && eb < TOL, "{ex:e} {eg:e} {eb:e}");
}

#[test]
fn pooling_and_relu_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(&[2, 2, 4, 6], &mut rng);
    let (y, idx) = ops::maxpool2(&x).unwrap();
    let r = random(y.shape(), &mut rng);
    let g = ops::maxpool2_backward(&idx, &r).unwrap();
    let e = finite_diff_gradcheck(|v| Ok(dot(&ops::maxpool2(&with(&x, v))?.0, &r)), x.data(), g.data(), EPS).unwrap();
    assert!(e < TOL, "maxpool {e:e}");

    let y = ops::global_avg(&x).unwrap();
    let r = random(y.shape(), &mut rng);
    let g = ops::global_avg_backward(x.shape(), &r).unwrap();
    let e = finite_diff_gradcheck(|v| Ok(dot(&ops::global_avg(&with(&x, v))?, &r)), x.data(), g.data(), EPS).unwrap();
    assert!(e < TOL, "global avg {e:e}");

    // keep probes away from the kink
    let x = Tensor::from_fn(&[40], |i| {
        let v: f64 = rng.random_range(0.05..1.0);
        if i % 2 == 0 { v } else { -v }
    });
    let r = random(&[40], &mut rng);
    let g = ops::relu_backward(&x, &r).unwrap();
    let e = finite_diff_gradcheck(|v| Ok(dot(&ops::relu(&with(&x, v)), &r)), x.data(), g.data(), EPS).unwrap();
    assert!(e < 1e-6, "relu {e:e}");
}

#[test]
fn softmax_cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let logits = Tensor::from_fn(&[4, 5], |_| rng.random_range(-3.0..3.0));
    let labels = [0, 3, 4, 1];
    let out = ops::softmax_cross_entropy(&logits, &labels).unwrap();
    for row in out.probs.data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let e = finite_diff_gradcheck(
        |v| Ok(ops::softmax_cross_entropy(&with(&logits, v), &labels)?.loss),
        logits.data(),
        out.grad_logits.data(),
        EPS,
    )
    .unwrap();
    assert!(e < TOL, "{e:e}");
}

fn tiny_arch() -> ArchSpec {
    ArchSpec::new(
        "tiny",
        [2, 8, 8],
        3,
        vec![
            LayerSpec::conv3x3(2, 4),
            LayerSpec::BatchNorm { channels: 4 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::conv3x3(4, 6),
            LayerSpec::BatchNorm { channels: 6 },
            LayerSpec::Relu,
            LayerSpec::GlobalAvg,
            LayerSpec::Dense { in_features: 6, out_features: 3 },
        ],
    )
    .unwrap()
}

#[test]
fn end_to_end_loss_gradient_on_tiny_network() {
    let arch = tiny_arch();
    let plan = SubNetworkPlan::new(
        &arch,
        0,
        0.75,
        RecombinationKind::ShuffleChannel,
        vec![
            ChannelSelection::new(0, vec![3, 0, 2], 4).unwrap(),
            ChannelSelection::new(4, vec![1, 5, 4, 0, 2], 6).unwrap(),
        ],
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random(&[4, 2, 8, 8], &mut rng);
    let labels = [0, 2, 1, 2];
    let mut net = SharedNetwork::<f64>::new(&arch, std::slice::from_ref(&plan), 3).unwrap();
    for slot in net.bank_mut().slots_mut() {
        let c = slot.channels();
        slot.scale.value = Tensor::from_fn(&[c], |_| rng.random_range(0.5..1.5));
        slot.shift.value = Tensor::from_fn(&[c], |_| rng.random_range(-0.5..0.5));
    }
    let pristine = net.store().clone();
    let bank = net.bank().clone();

    let logits = net.forward_subnet(&plan, &x, Mode::Train).unwrap();
    let out = ops::softmax_cross_entropy(&logits, &labels).unwrap();
    net.backward_subnet(&plan, &out.grad_logits).unwrap();

    let names: Vec<String> = pristine.names().to_vec();
    for name in &names {
        let analytic = net.store().get(name).unwrap().grad.clone();
        let value = pristine.get(name).unwrap().value.clone();
        let err = finite_diff_gradcheck(
            |v| {
                let mut probe = SharedNetwork::from_parts(arch.clone(), pristine.clone(), bank.clone())?;
                probe.store_mut().get_mut(name).unwrap().value = with(&value, v);
                let logits = probe.forward_subnet(&plan, &x, Mode::Train)?;
                Ok(ops::softmax_cross_entropy(&logits, &labels)?.loss)
            },
            value.data(),
            analytic.data(),
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "{name}: {err:e}");
    }

    for layer in 0..2 {
        let analytic = net.bank().slot(layer, 0).unwrap().scale.grad.clone();
        let value = bank.slot(layer, 0).unwrap().scale.value.clone();
        let err = finite_diff_gradcheck(
            |v| {
                let mut b = bank.clone();
                b.slot_mut(layer, 0)?.scale.value = with(&value, v);
                let mut probe = SharedNetwork::from_parts(arch.clone(), pristine.clone(), b)?;
                let logits = probe.forward_subnet(&plan, &x, Mode::Train)?;
                Ok(ops::softmax_cross_entropy(&logits, &labels)?.loss)
            },
            value.data(),
            analytic.data(),
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "bn {layer} scale: {err:e}");
    }
}
