"""Multi-turn consultation RL: dialogue MDP, scripted patient, rule-based rewards and GRPO."""

__version__ = "0.1.0"
