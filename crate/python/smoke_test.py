"""Smoke test for the migdial extension module.

Build and run:
    maturin develop --release
    python python/smoke_test.py
"""

import os
import tempfile

import migdial


def main():
    train = migdial.Corpus.generate(30, seed=1)
    test = migdial.Corpus.generate(8, seed=2)
    assert len(train) == 30
    assert migdial.Corpus.from_jsonl(train.to_jsonl()).dialog_ids() == train.dialog_ids()

    labels = [label for label, _ in train.stats()]
    assert labels[0] == "Number of instances", labels
    assert [label for label, _ in train.lexstats()] == ["Tokens", "Types", "LS", "TTR", "MSTR"]

    assert migdial.tokenize("Hi there")[0] == "hi"
    assert abs(migdial.f1("a b c", "b c d") - 2 / 3) < 1e-12
    assert migdial.ttr(["a", "a", "b", "c"]) == 0.75

    models = []
    for kind in ("seq2seq", "profile_memory", "starspace"):
        m = migdial.Model.train(train, model=kind, epochs=1, hidden_size=8, embed_dim=8, use_context=True)
        assert m.kind == kind and m.use_context
        reply = m.reply(["hello , i am here for my appointment"],
                        context=[("i support the hawks", "NP"), ("my knee hurts", "P")],
                        setting="public")
        assert isinstance(reply, str) and reply
        scores = m.score(["hello"], ["hi there", "my knee hurts"])
        assert len(scores) == 2
        row = m.evaluate(test, candidates=12, seed=0)
        assert (row["perplexity"] is None) == (kind == "starspace"), row
        models.append(m)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        models[0].save(path)
        again = migdial.Model.load(path)
        assert again.reply(["hello"]) == models[0].reply(["hello"])

    table = migdial.eval_table(models, test)
    print(table)
    assert table.splitlines()[0].startswith("Model")

    try:
        migdial.Model.train(train, colour="blue")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown training key accepted")
    print("smoke test ok")


if __name__ == "__main__":
    main()
