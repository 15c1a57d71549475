import numpy as np
import pytest

from invaudit.sim_core import DemandModel, ProductConfig, VltModel


@pytest.fixture
def base_config():
    """The reference economics: price 10, cost 4, hold 0.5, penalty 2, Poisson(8), VLT 2."""
    return ProductConfig(
        price=10.0, unit_cost=4.0, holding_cost=0.5, lost_sale_penalty=2.0, gamma=0.999,
        demand_model=DemandModel("poisson", 8.0), vlt_model=VltModel.deterministic(2), horizon_T=52,
    )


@pytest.fixture
def deterministic_config():
    def make(rate=3, lead=1, T=8, **kw):
        kw.setdefault("gamma", 1.0)
        return ProductConfig(
            demand_model=DemandModel("deterministic", rate), vlt_model=VltModel.deterministic(lead),
            horizon_T=T, **kw,
        )
    return make


def random_config(g: np.random.Generator, T=52, L=3, family=None) -> ProductConfig:
    price = g.uniform(5, 20)
    cost = price * g.uniform(0.2, 0.8)
    fam = family or g.choice(["poisson", "negative_binomial"])
    return ProductConfig(
        price=price, unit_cost=cost, holding_cost=cost * g.uniform(0, 0.1),
        lost_sale_penalty=price * g.uniform(0, 0.5), gamma=g.uniform(0.9, 1.0),
        demand_model=DemandModel(str(fam), g.uniform(0.5, 20), g.uniform(0, 0.5), 52.0,
                                 g.uniform(-0.05, 0.05), g.uniform(1, 20)),
        vlt_model=VltModel(tuple(g.dirichlet(np.ones(L)))), horizon_T=T,
        initial_on_hand=int(g.integers(0, 20)),
    )


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_line():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
