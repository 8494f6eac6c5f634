use std::ffi::CStr;

use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};

/// Runs `code` with the bindings importable as `aeqa_py` and a scratch
/// directory bound to `tmp`.
fn run(code: &CStr) {
    let dir = tempfile::tempdir().unwrap();
    Python::attach(|py| {
        let m = PyModule::new(py, "aeqa_py").unwrap();
        aeqa_py::register(&m).unwrap();
        let globals = PyDict::new(py);
        globals.set_item("aeqa_py", &m).unwrap();
        globals
            .set_item("tmp", dir.path().to_str().unwrap())
            .unwrap();
        if let Err(e) = py.run(code, Some(&globals), None) {
            e.display(py);
            panic!("python code failed: {e}");
        }
    });
}

const SMALL: &CStr = c"
import os
gen = {'n_train': 24, 'n_dev': 8, 'n_test': 8, 'seed': 3}
enc = {'d_model': 16, 'layers': 1, 'heads': 2, 'd_ff': 32, 'max_len': 32}
plan = {'mlm': {'epochs': 1, 'lr': 1e-3, 'batch_size': 2, 'accumulation': 2},
        'warmup': {'epochs': 1, 'lr': 1e-3, 'batch_size': 2, 'accumulation': 2},
        'finetune': {'epochs': 1, 'lr': 1e-3, 'batch_size': 2, 'accumulation': 2}}
";

fn with_small(body: &CStr) -> std::ffi::CString {
    let mut s = SMALL.to_bytes().to_vec();
    s.extend_from_slice(body.to_bytes());
    std::ffi::CString::new(s).unwrap()
}

#[test]
fn corpus_round_trip() {
    run(&with_small(
        c"
c = aeqa_py.Corpus.generate(gen)
assert c.size('train') == 24 and c.size('test') == 8
assert c.manifest['gen']['seed'] == 3
ex = c.exemplar('dev', 0)
assert set(['p_true', 'p_asr', 'frames_p', 'answer']) <= set(ex)
assert len(ex['choices_true']) == 4
path = os.path.join(tmp, 'data')
c.save(path)
d = aeqa_py.Corpus.load(path)
assert d.exemplar('train', 5) == c.exemplar('train', 5)
assert d.answers('test') == c.answers('test')
try:
    c.exemplar('dev', 99)
    raise AssertionError('expected IndexError')
except IndexError:
    pass
",
    ));
}

#[test]
fn attention_pooling() {
    run(c"
t = aeqa_py.Tsaatt(3, 5, seed=1)
frames = [[0.1, 0.2, 0.3], [0.5, -0.4, 0.0], [1.0, 0.0, -1.0]]
a = t.attend(frames)
assert len(a) == 3 and all(len(r) == 3 for r in a)
assert all(abs(sum(r) - 1.0) < 1e-12 for r in a)
v = t.pool(frames)
for i in range(3):
    col = [f[i] for f in frames]
    assert min(col) - 1e-12 <= v[i] <= max(col) + 1e-12
assert t.pool([[0.25, -2.0, 7.5]]) == [0.25, -2.0, 7.5]
assert len(t.encode(frames)) == 5
try:
    t.pool([])
    raise AssertionError('expected ValueError')
except ValueError:
    pass
");
}

#[test]
fn model_training_and_checkpoints() {
    run(&with_small(
        c"
c = aeqa_py.Corpus.generate(gen)
m = aeqa_py.Model('vanilla', 'asr', seed=4, config=enc)
try:
    m.train(c, ['finetune'], plan)
    raise AssertionError('expected StageOrderError')
except aeqa_py.StageOrderError:
    pass
log = m.train(c, ['mlm', 'warmup', 'finetune'], plan, seed=4)
assert m.completed == ['mlm', 'warmup', 'finetune']
epochs = [r for r in log if r['kind'] == 'epoch']
assert len(epochs) == 3, log[:2]
acc = m.accuracy(c, 'test')
assert 0.0 <= acc <= 1.0
path = os.path.join(tmp, 'ck')
m.save(path)
n = aeqa_py.Model.load(path)
assert n.scores(c, 'dev', 2) == m.scores(c, 'dev', 2)
assert n.config['d_model'] == 16 and n.variant == 'vanilla'
",
    ));
}

#[test]
fn baselines_and_distribution() {
    run(&with_small(
        c"
c = aeqa_py.Corpus.generate(dict(gen, n_dev=200))
r = aeqa_py.baseline_accuracy(c, 'dev', 'random', seed=1)
assert 0.15 < r < 0.35
assert 0.0 <= aeqa_py.baseline_accuracy(c, 'dev', 'choice_length_longest') <= 1.0
try:
    aeqa_py.baseline_accuracy(c, 'dev', 'choice_similarity_passage')
    raise AssertionError('expected ValueError')
except ValueError:
    pass
m = aeqa_py.Model('aebert', 'asr', config=enc)
assert 0.0 <= aeqa_py.baseline_accuracy(c, 'dev', 'choice_similarity_question', model=m) <= 1.0
p = aeqa_py.choice_distribution([1.0, 2.0, 3.0, 4.0])
assert abs(sum(p) - 1.0) < 1e-12 and p.index(max(p)) == 3
",
    ));
}

#[test]
fn experiment_report() {
    run(&with_small(c"
c = aeqa_py.Corpus.generate(gen)
out = os.path.join(tmp, 'run')
rep = aeqa_py.run_experiment(c, out, {'encoder': enc, 'plan': dict(plan, tsaatt={'epochs': 1, 'lr': 1e-3, 'batch_size': 2, 'accumulation': 1}), 'seed': 5})
keys = [s['key'] for s in rep['systems']]
assert {'vanilla', 'aebert', 'aebert_nopretrain', 'random'} <= set(keys), keys
assert len(rep['transcripts']) == 3
assert os.path.exists(os.path.join(out, 'results.json'))
"));
}

#[test]
fn gradient_check_suite() {
    run(c"
rep = aeqa_py.gradcheck()
assert all(e['passed'] for e in rep['entries'])
assert rep['implicated_ops'] == []
");
}
