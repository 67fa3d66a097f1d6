//! Operator implementations against independent brute-force oracles.

use qfx::rng::Rng;
use qfx::tensor::{
    batchnorm2d, batchnorm_fold, conv2d, conv2d_quant, global_avgpool, maxpool2d,
    quantize_tensor, BnParams, ConvParams, QuantConfig, Tensor,
};
use qfx::QFormat;

/// Direct six-nested-loop convolution, written from the definition.
fn conv_naive(input: &Tensor, p: &ConvParams) -> Tensor {
    let (n, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let out_h = (h + 2 * p.padding - p.kernel_h) / p.stride + 1;
    let out_w = (w + 2 * p.padding - p.kernel_w) / p.stride + 1;
    let mut out = Tensor::zeros(&[n, p.out_channels, out_h, out_w]);
    for bi in 0..n {
        for o in 0..p.out_channels {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = p.bias.as_ref().map_or(0.0, |b| b.data()[o]);
                    for ic in 0..c {
                        for ky in 0..p.kernel_h {
                            for kx in 0..p.kernel_w {
                                let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let x = input.data()
                                    [((bi * c + ic) * h + iy as usize) * w + ix as usize];
                                let wv = p.weights.data()
                                    [((o * c + ic) * p.kernel_h + ky) * p.kernel_w + kx];
                                acc += x * wv;
                            }
                        }
                    }
                    out.data_mut()[((bi * p.out_channels + o) * out_h + oy) * out_w + ox] = acc;
                }
            }
        }
    }
    out
}

fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| scale * rng.next_normal())
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn random_instance(rng: &mut Rng) -> (Tensor, ConvParams) {
    let n = 1 + rng.next_below(4);
    let c = 1 + rng.next_below(4);
    let o = 1 + rng.next_below(4);
    let k = 1 + rng.next_below(3);
    let stride = 1 + rng.next_below(2);
    let padding = rng.next_below(2);
    let h = (k + rng.next_below(12)).min(12).max(k);
    let w = (k + rng.next_below(12)).min(12).max(k);
    let weights = random_tensor(rng, &[o, c, k, k], 0.5);
    let bias = if rng.next_below(2) == 0 {
        Some(random_tensor(rng, &[o], 0.5))
    } else {
        None
    };
    let input = random_tensor(rng, &[n, c, h, w], 1.0);
    (input, ConvParams::new(weights, bias, stride, padding).unwrap())
}

#[test]
fn conv2d_matches_naive_oracle_on_200_instances() {
    let mut rng = Rng::new(0xC0DE);
    for trial in 0..200 {
        let (input, p) = random_instance(&mut rng);
        let fast = conv2d(&input, &p).unwrap();
        let slow = conv_naive(&input, &p);
        let diff = fast.max_abs_diff(&slow);
        assert!(diff <= 1e-6, "trial {trial}: max abs diff {diff}");
    }
}

#[test]
fn conv2d_quant_composes_quantize_and_naive_conv() {
    let mut rng = Rng::new(0xC0DE + 1);
    let formats = [
        QFormat::new(3, 3).unwrap(),
        QFormat::new(4, 4).unwrap(),
        QFormat::new(8, 8).unwrap(),
    ];
    for trial in 0..60 {
        let (input, mut p) = random_instance(&mut rng);
        let fmt = formats[trial % formats.len()];
        let qc = QuantConfig::uniform(fmt);
        // Inputs arrive on the activation grid, as in a quantized network.
        let input = quantize_tensor(&input, fmt).unwrap();
        let fast = conv2d_quant(&input, &p, &qc).unwrap();

        // Oracle: quantize weights/bias, run the naive conv, quantize output.
        p.weights = quantize_tensor(&p.weights, qc.weight_format).unwrap();
        p.bias = p
            .bias
            .map(|b| quantize_tensor(&b, qc.activation_format).unwrap());
        let slow = quantize_tensor(&conv_naive(&input, &p), qc.activation_format).unwrap();
        assert_eq!(
            fast.data(),
            slow.data(),
            "trial {trial} format {fmt} mismatch"
        );

        // Grid membership of every output element.
        for &v in fast.data() {
            let code = v / fmt.step();
            assert_eq!(code, code.round(), "off-grid output {v} in {fmt}");
            assert!(v >= fmt.min_value() && v <= fmt.max_value());
        }
    }
}

#[test]
fn maxpool_matches_direct_enumeration() {
    let mut rng = Rng::new(7);
    let input = random_tensor(&mut rng, &[1, 2, 4, 4], 1.0);
    let out = maxpool2d(&input, (2, 2), 2).unwrap();
    for ci in 0..2 {
        for oy in 0..2 {
            for ox in 0..2 {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = input.data()[(ci * 4 + oy * 2 + dy) * 4 + ox * 2 + dx];
                        best = best.max(v);
                    }
                }
                assert_eq!(out.data()[(ci * 2 + oy) * 2 + ox], best);
            }
        }
    }
}

#[test]
fn avgpool_matches_direct_enumeration() {
    let mut rng = Rng::new(8);
    let input = random_tensor(&mut rng, &[1, 2, 4, 4], 1.0);
    let out = global_avgpool(&input).unwrap();
    for ci in 0..2 {
        let mean: f64 = input.data()[ci * 16..][..16].iter().sum::<f64>() / 16.0;
        assert!((out.data()[ci] - mean).abs() < 1e-12);
    }
}

#[test]
fn folded_conv_matches_conv_then_bn_on_random_stats() {
    let mut rng = Rng::new(9);
    for trial in 0..40 {
        let (input, p) = random_instance(&mut rng);
        let c = p.out_channels;
        let bn = BnParams::new(
            random_tensor(&mut rng, &[c], 0.6),
            random_tensor(&mut rng, &[c], 0.4),
            random_tensor(&mut rng, &[c], 0.3),
            // Variances strictly positive.
            Tensor::from_vec(&[c], (0..c).map(|_| 0.2 + rng.next_f64()).collect()).unwrap(),
            1e-5,
        )
        .unwrap();
        let composed = batchnorm2d(&conv2d(&input, &p).unwrap(), &bn).unwrap();
        let folded = conv2d(&input, &batchnorm_fold(&p, &bn).unwrap()).unwrap();
        let scale = composed
            .data()
            .iter()
            .map(|x| x.abs())
            .fold(1e-9, f64::max);
        let rel = folded.max_abs_diff(&composed) / scale;
        assert!(rel <= 1e-6, "trial {trial}: relative drift {rel}");
    }
}
