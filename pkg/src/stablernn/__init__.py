"""Recurrent network identification with stability certificates.

Four model families (NNARX, ESN, LSTM, GRU) with hand-written simulation
gradients, weight conditions for input-to-state stability, a chemical plant
simulator for benchmark data, physics-structured LSTM composites and
scenario-based reachability bounds.
"""
__version__ = "0.1.0"
