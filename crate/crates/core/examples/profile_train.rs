use std::time::Instant;
use xmda_core::data::{generate_corpus, SyntheticSpec};
use xmda_core::model::{Model, ModelConfig};
use xmda_core::rng::SeededRng;
use xmda_core::train::{build_train_items, InputMode};

fn main() {
    let corpus = generate_corpus(&SyntheticSpec::default()).unwrap();
    let mut cfg = ModelConfig::desk_default(corpus.gloss_vocab.len(), corpus.word_vocab.len(), corpus.feat_dim());
    cfg.has_gloss_table = false;
    let model = Model::new(cfg.clone(), 1).unwrap();
    let items = build_train_items(&corpus, None, &cfg);
    let n = 400;

    // forward only (train-mode binding, no backward)
    let t = Instant::now();
    for item in items.iter().take(n) {
        let rng = SeededRng::stream(1, "dropout", item.stable_idx as u64);
        let mut f = model.forward_ctx(true, Some(rng));
        let x = model.embed_frames(&mut f, item.frames.as_ref().unwrap()).unwrap();
        let h = model.encode(&mut f, x).unwrap();
        let logits = model.decode_teacher_forced(&mut f, h, &item.target).unwrap();
        let mle = model.mle_loss(&mut f, logits, &item.target).unwrap();
        let lp = model.ctc_head(&mut f, h).unwrap();
        let ctc = f.g.ctc_neg_log(lp, &item.gloss_ids).unwrap();
        let total = f.g.add(mle, ctc).unwrap();
        std::hint::black_box(f.g.value(total).item());
    }
    println!("forward only:      {:.2} ms/sample", t.elapsed().as_secs_f64() * 1000.0 / n as f64);

    // forward + backward + grad collect
    let t = Instant::now();
    for item in items.iter().take(n) {
        let rng = SeededRng::stream(1, "dropout", item.stable_idx as u64);
        let mut f = model.forward_ctx(true, Some(rng));
        let x = model.embed_frames(&mut f, item.frames.as_ref().unwrap()).unwrap();
        let h = model.encode(&mut f, x).unwrap();
        let logits = model.decode_teacher_forced(&mut f, h, &item.target).unwrap();
        let mle = model.mle_loss(&mut f, logits, &item.target).unwrap();
        let lp = model.ctc_head(&mut f, h).unwrap();
        let ctc = f.g.ctc_neg_log(lp, &item.gloss_ids).unwrap();
        let total = f.g.add(mle, ctc).unwrap();
        f.g.backward(total).unwrap();
        let mut acc = 0.0;
        for (id, p) in model.params.iter() {
            if p.trainable {
                if let Some(g) = f.param_grad(id) { acc += g[0]; }
            }
        }
        std::hint::black_box(acc);
    }
    println!("forward+backward:  {:.2} ms/sample", t.elapsed().as_secs_f64() * 1000.0 / n as f64);

    // binding only
    let t = Instant::now();
    for i in 0..n {
        let mut f = model.forward_ctx(true, None);
        let mut acc = 0usize;
        for (id, _) in model.params.iter() {
            acc += f.p(id);
        }
        std::hint::black_box((acc, i));
    }
    println!("bind all params:   {:.2} ms/sample", t.elapsed().as_secs_f64() * 1000.0 / n as f64);

    // eval-mode greedy decode
    let t = Instant::now();
    for item in items.iter().take(100) {
        let emb = model.embed_frames_eval(item.frames.as_ref().unwrap()).unwrap();
        let h = model.encode_eval(&emb).unwrap();
        std::hint::black_box(model.generate(&h, 1).unwrap());
    }
    println!("greedy decode:     {:.2} ms/sample", t.elapsed().as_secs_f64() * 1000.0 / 100.0);
}
