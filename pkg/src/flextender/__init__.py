"""FlexTender: Tendermint-style BFT consensus with flexible endorsement
policies, an execute-order-validate baseline, and a deterministic simulator."""

__version__ = "0.1.0"
