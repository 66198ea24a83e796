import time
from gfcast.services.runner import Runner


def test_runner_keeps_input_order():
    """Test that results come back in input order whatever the completion order."""

    def slow_first(k: int) -> int:
        time.sleep(0.01 * (5 - k % 5))
        return k * k

    assert Runner(4).map("squares", slow_first, range(20)) == [k * k for k in range(20)]


def test_runner_single_thread():
    """Test the sequential path and an empty task list."""
    runner = Runner(1)
    assert runner.threads == 1
    assert runner.map("noop", str, []) == []
    assert runner.map("strings", str, [1, 2]) == ["1", "2"]
