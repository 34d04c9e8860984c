"""Result models produced by analysis, fusion, training and benchmarking."""

from collections.abc import Iterator

from pydantic import BaseModel, Field, model_validator


class MacReport(BaseModel):
    """Multiply-accumulate and parameter counts as a tree; inner nodes hold subtree totals."""

    name: str
    macs: int = Field(..., ge=0)
    params: int = Field(..., ge=0)
    children: list["MacReport"] = Field(default_factory=list)

    @model_validator(mode="after")
    def validate_totals(self) -> "MacReport":
        """Inner node totals must equal the sum over their children."""
        if self.children:
            macs = sum(child.macs for child in self.children)
            params = sum(child.params for child in self.children)
            if (macs, params) != (self.macs, self.params):
                raise ValueError(
                    f"node {self.name}: totals ({self.macs}, {self.params}) "
                    f"differ from children ({macs}, {params})"
                )
        return self

    @classmethod
    def leaf(cls, name: str, macs: int, params: int) -> "MacReport":
        return cls(name=name, macs=macs, params=params)

    @classmethod
    def node(cls, name: str, children: list["MacReport"]) -> "MacReport":
        return cls(
            name=name,
            macs=sum(child.macs for child in children),
            params=sum(child.params for child in children),
            children=children,
        )

    def leaves(self, prefix: str = "") -> Iterator[tuple[str, "MacReport"]]:
        """Yield (dotted path, leaf) pairs in depth-first order."""
        path = f"{prefix}.{self.name}" if prefix else self.name
        if not self.children:
            yield path, self
            return
        for child in self.children:
            yield from child.leaves(path)

    def find(self, name: str) -> "MacReport | None":
        """Depth-first search for the first node with the given name."""
        if self.name == name:
            return self
        for child in self.children:
            found = child.find(name)
            if found is not None:
                return found
        return None


class FusionReport(BaseModel):
    """Outcome of comparing a train-mode model against its fused deploy form."""

    max_abs_diff: float = Field(..., ge=0)
    tol: float = Field(..., gt=0)
    n_samples: int = Field(..., gt=0)
    passed: bool
    dtype: str
    fused_blocks: int = Field(default=0, ge=0)
    macs_before: int = Field(..., ge=0)
    macs_after: int = Field(..., ge=0)
    params_before: int = Field(..., ge=0)
    params_after: int = Field(..., ge=0)
    argmax_agreement: float | None = Field(default=None, ge=0, le=1)

    @property
    def mac_delta(self) -> int:
        return self.macs_after - self.macs_before

    @property
    def param_delta(self) -> int:
        return self.params_after - self.params_before


class RankReport(BaseModel):
    """Numerical rank of stacked quadratic-form coefficient vectors."""

    d: int = Field(..., ge=1)
    samples: int = Field(..., ge=1)
    estimated_rank: int = Field(..., ge=0)
    expected: int = Field(..., ge=1)
    tol: float = Field(..., gt=0)
    sigma_max: float
    sigma_cutoff: float
    passed: bool


class SweepRow(BaseModel):
    """MAC counts of ConvFFN and Multiplication at one expansion factor."""

    e: float
    macs_convffn: int
    macs_mult: int
    ratio: float
    closed_convffn: float
    closed_mult: float
    oracle_convffn: int | None = None
    oracle_mult: int | None = None

    @property
    def consistent(self) -> bool:
        if self.oracle_convffn is not None and self.oracle_convffn != self.macs_convffn:
            return False
        return self.oracle_mult is None or self.oracle_mult == self.macs_mult


class SweepTable(BaseModel):
    """Expansion sweep plus the cross ratio of Multiplication(9) over ConvFFN(7)."""

    c: int
    height: int
    width: int
    rows: list[SweepRow]
    cross_ratio: float
    cross_ratio_exact: str
    cross_ratio_measured: float

    @property
    def consistent(self) -> bool:
        return all(row.consistent for row in self.rows)


class GradcheckEntry(BaseModel):
    name: str
    max_abs_err: float
    rel_err: float
    passed: bool


class GradcheckReport(BaseModel):
    """Tape gradients versus central finite differences for one block."""

    block: str
    tol: float
    entries: list[GradcheckEntry]

    @property
    def passed(self) -> bool:
        return all(entry.passed for entry in self.entries)

    @property
    def worst(self) -> GradcheckEntry:
        return max(self.entries, key=lambda entry: entry.rel_err)


class TrainResult(BaseModel):
    """Per-step losses and final accuracy of a toy training run."""

    block_kind: str
    expansion: float
    seed: int
    steps: int
    initial_loss: float
    loss_curve: list[float]
    final_loss: float
    final_train_acc: float = Field(..., ge=0, le=1)
    macs_per_sample: int
    params: int


class BenchReport(BaseModel):
    """Wall-clock forward timings; informational only."""

    iters: int
    warmup: int
    median_ms: float
    p10_ms: float
    p90_ms: float
    macs: int
    params: int
    fused: bool = False
    mac_delta: int | None = None
