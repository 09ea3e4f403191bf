"""Desk-scale mixture-of-LoRAs with constant routing weights, REINFORCE
leave-one-out router training, top-k inference, and a numerical theory lab."""

__version__ = "0.1.0"
