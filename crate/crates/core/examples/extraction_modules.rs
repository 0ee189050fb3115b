//! One extraction step of each module on random inputs: output shapes, the
//! attention matrix and what happens to the feature map.
//!
//! `cargo run --example extraction_modules`

use structtoken::decoder::extraction::{cse_specs, pwe_specs, sse_specs};
use structtoken::decoder::{cse_forward, pwe_forward, sse_forward};
use structtoken::params::ParamStore;
use structtoken::{Graph, Result, Tensor, Variant};

fn main() -> Result<()> {
    let (c, k, h, w) = (8, 3, 6, 6);
    let tokens = Tensor::from_fn(&[k, h, w], |i| (i as f64 * 0.13).sin());
    let features = Tensor::from_fn(&[c, h, w], |i| (i as f64 * 0.29).cos());
    for v in Variant::ALL {
        let specs = match v {
            Variant::Cse => cse_specs("x", c, k),
            Variant::Sse => sse_specs("x", c, k),
            Variant::Pwe => pwe_specs("x", c, k),
        };
        let store = ParamStore::<f64>::init(&specs, 7);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let s = g.constant(tokens.clone());
        let f = g.constant(features.clone());
        let out = match v {
            Variant::Cse => cse_forward(&mut g, &p, "x", s, f, false)?,
            Variant::Sse => sse_forward(&mut g, &p, "x", s, f, false)?,
            Variant::Pwe => pwe_forward(&mut g, &p, "x", s, f, false)?,
        };
        let feature_delta = g.value(out.features).max_abs_diff(&features);
        print!(
            "{v}: tokens {:?}, features {:?} (max change {feature_delta:.3e})",
            g.shape(out.tokens),
            g.shape(out.features)
        );
        match out.attention {
            Some(a) => {
                let a = g.value(a);
                let cols = a.shape()[1];
                let worst = a
                    .data()
                    .chunks(cols)
                    .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
                    .fold(0.0, f64::max);
                println!(", attention {:?} with rows summing to 1 ± {worst:.1e}", a.shape());
            }
            None => println!(", no attention"),
        }
        println!("  {} parameters", store.num_scalars());
    }
    Ok(())
}
