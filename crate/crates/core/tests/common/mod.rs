//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use querylab::corpus::{synthesize_corpus, synthesize_gazetteer, SynthConfig};
use querylab::model::{EncoderConfig, Model};
use querylab::numerics::RngStream;
use querylab::taskgen::{PretrainData, PretrainExample, TaskConfig};
use querylab::text::Vocab;

/// Geohash by scaling each axis to an integer grid and interleaving bits,
/// longitude first. Shares no code with the library encoder.
pub fn geohash_oracle(lat: f64, lon: f64, chars: usize) -> String {
    const ALPHABET: &[u8] = b"0123456789bcdefghjkmnpqrstuvwxyz";
    let bits = 5 * chars;
    let lon_bits = bits.div_ceil(2);
    let lat_bits = bits / 2;
    let cell = |v: f64, lo: f64, span: f64, n: usize| -> u64 {
        let cells = 1u64 << n;
        (((v - lo) / span * cells as f64).floor() as u64).min(cells - 1)
    };
    let x = cell(lon, -180.0, 360.0, lon_bits);
    let y = cell(lat, -90.0, 180.0, lat_bits);
    let mut code = 0u64;
    let (mut xi, mut yi) = (lon_bits, lat_bits);
    for b in 0..bits {
        code <<= 1;
        if b % 2 == 0 {
            xi -= 1;
            code |= (x >> xi) & 1;
        } else {
            yi -= 1;
            code |= (y >> yi) & 1;
        }
    }
    (0..chars)
        .rev()
        .map(|i| ALPHABET[((code >> (5 * i)) & 31) as usize] as char)
        .collect()
}

/// Tiny float64 model plus a B=2 batch that exercises every loss.
pub fn small_batch() -> (Model<f64>, Vec<PretrainExample>) {
    let synth = SynthConfig {
        n_cities: 3,
        n_pois_per_city: 3,
        n_intents: 4,
        n_pairs: 60,
        ..SynthConfig::default()
    };
    let gaz = synthesize_gazetteer(&synth).unwrap();
    let pairs = synthesize_corpus(&synth, &gaz).unwrap();
    let vocab = Vocab::build(pairs.iter().flat_map(|p| [p.query.as_str(), p.item_title.as_str()]));
    let (data, _) = PretrainData::from_corpus(&pairs, &vocab, &gaz, TaskConfig::default()).unwrap();
    let mut rng = RngStream::new(3);
    // find a batch that exercises every loss
    let batch = loop {
        let b = data.build_batch(&mut rng, 2, &mut Default::default()).unwrap();
        let masked = b.iter().any(|e| e.mlm_labels.iter().any(Option::is_some));
        let ordered = b.iter().all(|e| e.order_labels.is_some());
        if masked && ordered {
            break b;
        }
    };
    let cfg = EncoderConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_len: 48,
        dropout: 0.0,
        ..EncoderConfig::default()
    };
    // larger init so every path carries a non-trivial gradient
    let cfg = EncoderConfig { init_std: 0.2, ..cfg };
    (Model::init(cfg, &mut RngStream::new(11)).unwrap(), batch)
}
