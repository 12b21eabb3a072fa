"""Federated anomaly detection over bank-held account flags.

The hub trains a transaction anomaly detector whose secret 18th input is the
receiver account's flag, held only by the receiver's bank. Flags enter the
training and scoring through oblivious transfer and additive secret sharing;
an aggregator sums the shared updates and adds noise.
"""
__version__ = "0.1.0"
