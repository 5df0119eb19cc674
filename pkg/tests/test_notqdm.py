import sys

from distilrl import notqdm


def test_passes_iteration_through(capsys):
    bar = notqdm.tqdm(range(3), disable=True, dynamic_ncols=True)
    bar.set_postfix(reward=0.5)
    bar.update()
    assert list(bar) == [0, 1, 2]
    assert capsys.readouterr().err == ""


def test_enabled_bar_prints_a_hint(capsys):
    assert list(notqdm.tqdm([1, 2])) == [1, 2]
    assert "install tqdm" in capsys.readouterr().err


def test_empty_bar():
    with notqdm.tqdm(total=4) as bar:
        assert list(bar) == []


def test_write_goes_to_the_given_stream(capsys):
    notqdm.tqdm.write("[distilrl.search] hello", file=sys.stderr)
    captured = capsys.readouterr()
    assert captured.err == "[distilrl.search] hello\n"
    assert captured.out == ""
