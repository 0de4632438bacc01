"""
Scenario generation, assumption checks, persistence and the experiment harness
"""
