# Test package for the Financial QA Agent Framework
