import numpy as np

from wsialign import pipeline as pl
from wsialign import slide_synth as ss


def test_prepare_slide_gives_model_inputs():
    spec = ss.default_spec(n_cases=2, seed=3)
    case = ss.generate_corpus(spec)[0]
    ps, emb = pl.prepare_slide(spec, case, case.slides[0])
    assert ps.coords and emb.matrix.shape == (len(ps.coords), 384)
    assert np.array_equal(emb.coords, np.array(ps.coords))


def test_blank_slide_falls_back_to_origin_patch():
    spec = ss.default_spec(n_cases=1, seed=3)
    case = ss.generate_corpus(spec)[0]
    white = np.full((640, 640, 3), 255, np.uint8)
    ps, emb = pl.prepare_slide(spec, case, case.slides[0], image=white)
    assert ps.coords == [(0, 0)] and emb.matrix.shape == (1, 384)


def test_desk_corpus_split_and_cache(tmp_path):
    spec = ss.default_spec(n_cases=20, seed=5)
    a = pl.desk_corpus(spec, fractions=(0.8, 0.2, 0.0), cache_dir=tmp_path)
    assert len(list(tmp_path.glob("desk-*.npz"))) == 1
    b = pl.desk_corpus(spec, fractions=(0.8, 0.2, 0.0), cache_dir=tmp_path)
    assert [e.slide_id for e in a.examples] == [e.slide_id for e in b.examples]
    assert all(np.array_equal(x.input, y.input) for x, y in zip(a.examples, b.examples))
    train, val = a.subset("train"), a.subset("validation")
    assert len(train) + len(val) == len(a.examples)
    assert not {e.case_id for e in train} & {e.case_id for e in val}
    inputs, texts = a.arrays("train")
    assert len(inputs) == len(texts) == len(train)
    for e in a.examples:
        assert e.keyword in e.text and e.severity in (1, 2, 3)
