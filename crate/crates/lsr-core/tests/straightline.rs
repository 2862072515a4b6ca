//! Straight-line reimplementation oracle for the full forward pass.
//!
//! Everything here is written with plain nested loops over `Vec<f64>` —
//! no tape, no Encoder, no shared kernels — so it exercises an independent
//! route through the same arithmetic: embeddings, per-head attention,
//! feed-forward, adapters, the term-weight head, and the classification
//! head.

use lsr_core::encoder::{
    init_adapters, init_backbone, AdapterConfig, AdapterSet, Encoder, EncoderConfig,
    TokenSequence,
};
use lsr_core::linalg::Precision;
use lsr_core::reranker::{init_cross_encoder, CrossEncoder, PairInput};
use lsr_core::sparse::term_logits_on_tape;
use lsr_core::tape::{ParameterStore, Tape};
use lsr_core::verify::randomize_generic;

type Mat = Vec<Vec<f64>>;

fn get(store: &ParameterStore, name: &str) -> Mat {
    let m = store.value(name).unwrap();
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i][l] * b[l][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    let d = x[0].len() as f64;
    x.iter()
        .map(|row| {
            let mean: f64 = row.iter().sum::<f64>() / d;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + 1e-12).sqrt();
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) * inv * gain[c] + bias[c])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn add_rows(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
        .collect()
}

fn adapter(store: &ParameterStore, h: &Mat, name: &str) -> Mat {
    let dw = get(store, &format!("{name}.down_w"));
    let db = get(store, &format!("{name}.down_b"));
    let uw = get(store, &format!("{name}.up_w"));
    let ub = get(store, &format!("{name}.up_b"));
    let mut down = matmul(h, &dw);
    for row in &mut down {
        for (c, v) in row.iter_mut().enumerate() {
            *v = gelu(*v + db[0][c]);
        }
    }
    let mut up = matmul(&down, &uw);
    for row in &mut up {
        for (c, v) in row.iter_mut().enumerate() {
            *v += ub[0][c];
        }
    }
    add_rows(h, &up)
}

/// Full forward pass, scalar loops only.
fn forward(
    store: &ParameterStore,
    cfg: &EncoderConfig,
    acfg: &AdapterConfig,
    ids: &[u32],
    mask: &[u8],
    segments: Option<&[u8]>,
) -> Mat {
    let token = get(store, "embed.token");
    let pos = get(store, "embed.pos");
    let n = ids.len();
    let d = cfg.hidden_dim;
    let mut x: Mat = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..d)
                .map(|c| token[ids[i] as usize][c] + pos[i][c])
                .collect();
            if let Some(seg) = segments {
                let seg_table = get(store, "embed.segment");
                for (c, v) in row.iter_mut().enumerate() {
                    *v += seg_table[seg[i] as usize][c];
                }
            }
            row
        })
        .collect();
    x = layer_norm(
        &x,
        &get(store, "embed.ln.gain")[0],
        &get(store, "embed.ln.bias")[0],
    );

    let dk = cfg.head_dim();
    for layer in 0..cfg.num_layers {
        // attention
        let q = matmul(&x, &get(store, &format!("layer.{layer}.attn.wq")));
        let k = matmul(&x, &get(store, &format!("layer.{layer}.attn.wk")));
        let v = matmul(&x, &get(store, &format!("layer.{layer}.attn.wv")));
        let mut cat = vec![vec![0.0; d]; n];
        for h in 0..cfg.num_heads {
            for i in 0..n {
                let mut logits = vec![0.0; n];
                for j in 0..n {
                    let mut dot = 0.0;
                    for c in 0..dk {
                        dot += q[i][h * dk + c] * k[j][h * dk + c];
                    }
                    logits[j] =
                        dot / (dk as f64).sqrt() + if mask[j] == 0 { -1e9 } else { 0.0 };
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..dk {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += exps[j] / z * v[j][h * dk + c];
                    }
                    cat[i][h * dk + c] = acc;
                }
            }
        }
        let mut proj = matmul(&cat, &get(store, &format!("layer.{layer}.attn.wo")));
        if acfg.active_layers.contains(&layer) && acfg.after_attention {
            proj = adapter(store, &proj, &format!("adapter.shared.{layer}.attn"));
        }
        x = layer_norm(
            &add_rows(&x, &proj),
            &get(store, &format!("layer.{layer}.attn_ln.gain"))[0],
            &get(store, &format!("layer.{layer}.attn_ln.bias"))[0],
        );

        // feed-forward
        let w1 = get(store, &format!("layer.{layer}.ffn.w1"));
        let b1 = get(store, &format!("layer.{layer}.ffn.b1"));
        let w2 = get(store, &format!("layer.{layer}.ffn.w2"));
        let b2 = get(store, &format!("layer.{layer}.ffn.b2"));
        let mut h = matmul(&x, &w1);
        for row in &mut h {
            for (c, v) in row.iter_mut().enumerate() {
                *v = gelu(*v + b1[0][c]);
            }
        }
        let mut f = matmul(&h, &w2);
        for row in &mut f {
            for (c, v) in row.iter_mut().enumerate() {
                *v += b2[0][c];
            }
        }
        if acfg.active_layers.contains(&layer) && acfg.after_ffn {
            f = adapter(store, &f, &format!("adapter.shared.{layer}.ffn"));
        }
        x = layer_norm(
            &add_rows(&x, &f),
            &get(store, &format!("layer.{layer}.ffn_ln.gain"))[0],
            &get(store, &format!("layer.{layer}.ffn_ln.bias"))[0],
        );
    }
    x
}

fn term_logits(store: &ParameterStore, hidden: &Mat) -> Mat {
    let w = get(store, "head.transform.w");
    let b = get(store, "head.transform.b");
    let mut t = matmul(hidden, &w);
    for row in &mut t {
        for (c, v) in row.iter_mut().enumerate() {
            *v = gelu(*v + b[0][c]);
        }
    }
    let t = layer_norm(&t, &get(store, "head.ln.gain")[0], &get(store, "head.ln.bias")[0]);
    let e = get(store, "embed.token");
    let bias = get(store, "head.vocab_bias");
    let (n, vs) = (t.len(), e.len());
    let mut out = vec![vec![0.0; vs]; n];
    for i in 0..n {
        for j in 0..vs {
            let mut acc = 0.0;
            for c in 0..t[0].len() {
                acc += t[i][c] * e[j][c];
            }
            out[i][j] = acc + bias[0][j];
        }
    }
    out
}

fn toy_config() -> (EncoderConfig, AdapterConfig) {
    let cfg = EncoderConfig {
        num_layers: 2,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 12,
        vocab_size: 15,
        max_seq_len: 10,
        precision: Precision::F64,
    };
    let acfg = AdapterConfig::houlsby(cfg.num_layers, 4);
    (cfg, acfg)
}

#[test]
fn encode_matches_straight_line_oracle() {
    let (cfg, acfg) = toy_config();
    let mut store = init_backbone(&cfg, 91).unwrap();
    init_adapters(&mut store, &cfg, &acfg, 91).unwrap();
    // generic weights so the adapters actually do something
    randomize_generic(&mut store, 0.3, 17);

    let ids = vec![2u32, 9, 4, 11];
    let mask = vec![1u8, 1, 1, 0];
    let seq = TokenSequence::new(ids.clone(), mask.clone()).unwrap();

    let enc = Encoder::new(&cfg, &acfg, &store).unwrap();
    let mut tape = Tape::new();
    let hidden = enc.encode(&mut tape, &seq, AdapterSet::Shared).unwrap();
    let got = tape.value(hidden);

    let want = forward(&store, &cfg, &acfg, &ids, &mask, None);
    for r in 0..ids.len() {
        for c in 0..cfg.hidden_dim {
            assert!(
                (got.get(r, c) - want[r][c]).abs() < 1e-10,
                "hidden[{r}][{c}]: {} vs {}",
                got.get(r, c),
                want[r][c]
            );
        }
    }

    // and through the term-weight head
    let logits = term_logits_on_tape(&mut tape, &store, hidden).unwrap();
    let got_logits = tape.value(logits);
    let want_logits = term_logits(&store, &want);
    for r in 0..ids.len() {
        for j in 0..cfg.vocab_size {
            assert!(
                (got_logits.get(r, j) - want_logits[r][j]).abs() < 1e-9,
                "logits[{r}][{j}]"
            );
        }
    }
}

#[test]
fn cross_encode_matches_straight_line_oracle() {
    let (cfg, acfg) = toy_config();
    let mut store = init_cross_encoder(&cfg, &acfg, 37).unwrap();
    randomize_generic(&mut store, 0.3, 53);

    let ids = vec![1u32, 5, 2, 8, 9]; // [START] q [SEP] d d
    let segments = vec![0u8, 0, 0, 1, 1];
    let mask = vec![1u8; 5];
    let pair = PairInput {
        seq: TokenSequence::new(ids.clone(), mask.clone()).unwrap(),
        segments: segments.clone(),
    };

    let ce = CrossEncoder::new(&cfg, &acfg, &store).unwrap();
    let got = ce.score(&pair).unwrap();

    let hidden = forward(&store, &cfg, &acfg, &ids, &mask, Some(&segments));
    let w = get(&store, "cls.w");
    let b = get(&store, "cls.b");
    let want: f64 = hidden[0]
        .iter()
        .enumerate()
        .map(|(c, v)| v * w[c][0])
        .sum::<f64>()
        + b[0][0];
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
}
