use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wsireport::decoder::{
    greedy_decode, project_features, train, DecoderConfig, DecoderModel, Matrix, TrainConfig, TrainExample, BOS_ID,
    EOS_ID, RESERVED_IDS,
};

fn pairs(seed: u64, feat_dim: usize, vocab: usize) -> Vec<TrainExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..4)
        .map(|_| {
            let n = rng.gen_range(2..=4);
            let features = Matrix::from_fn(n, feat_dim, |_, _| rng.gen_range(-1.0..1.0));
            let len = rng.gen_range(3..=6);
            TrainExample { features, tokens: (0..len).map(|_| rng.gen_range(RESERVED_IDS..vocab as u32)).collect() }
        })
        .collect()
}

#[test]
fn small_decoder_memorizes_its_pairs() {
    let cfg = DecoderConfig { layers: 1, heads: 2, d_model: 16, d_ff: 32, dropout: 0.0, max_len: 8, vocab: 20, feat_dim: 8 };
    let data = pairs(3, cfg.feat_dim, cfg.vocab);
    let tc = TrainConfig { warmup_epochs: 5, warmup_lr: 5e-3, base_lr: 5e-4, batch_size: 4, epochs: 300, seed: 9, ..TrainConfig::default() };
    let mut model = DecoderModel::xavier_init(&cfg, 9).unwrap();
    let logs = train(&mut model, &data, &tc, |_| {}).unwrap();
    assert!(logs.last().unwrap().loss < logs[0].loss);
    for ex in &data {
        let mem = project_features(&ex.features, &model.proj).unwrap();
        let out = greedy_decode(&model, &mem, &vec![false; mem.rows], BOS_ID, EOS_ID).unwrap();
        assert_eq!(out, ex.tokens);
    }
}
