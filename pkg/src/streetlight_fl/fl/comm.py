"""Byte accounting for model exchange."""
from __future__ import annotations

from dataclasses import dataclass, field

# circa 150 GB over 350,000 images
DEFAULT_BYTES_PER_IMAGE = 428_571


@dataclass
class CommLedger:
    bytes_up: int = 0
    bytes_down: int = 0
    per_round: list[tuple[int, int, int]] = field(default_factory=list)

    def record(self, round_index: int, participants: int, up: int, down: int) -> None:
        self.bytes_up += up
        self.bytes_down += down
        self.per_round.append((round_index, participants, up + down))

    @property
    def total(self) -> int:
        return self.bytes_up + self.bytes_down

    def consistent(self) -> bool:
        return self.total == sum(b for _, _, b in self.per_round)


@dataclass(frozen=True)
class CommSummary:
    fl_bytes: int
    bytes_up: int
    bytes_down: int
    centralised_bytes: int
    training_images: int
    bytes_per_image: int
    ratio: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def comm_cost(ledger: CommLedger, training_images: int,
              bytes_per_image: int = DEFAULT_BYTES_PER_IMAGE) -> CommSummary:
    central = training_images * bytes_per_image
    ratio = ledger.total / central if central else float("inf")
    return CommSummary(ledger.total, ledger.bytes_up, ledger.bytes_down, central,
                       training_images, bytes_per_image, ratio)
