# Fixture builders shared by the test modules.
